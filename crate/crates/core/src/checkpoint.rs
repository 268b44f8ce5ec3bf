//! Training checkpoints: `checkpoint.json` (metadata plus a tensor index)
//! next to `tensors.bin` (every tensor as 32-bit little-endian floats).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::NamedArrays;
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::preprocess::dataset::{f32le_bytes, parse_f32le, write_json};
use crate::train::optim::Adam;
use crate::train::{Model, ModelKind, Normalizer, TrainConfig, TrainState};
use crate::Array;

pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const TENSORS_BIN: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const STATE: &str = "initial/";
const NORM_MEAN: &str = "normalizer.mean";
const NORM_STD: &str = "normalizer.std";

/// Location of one tensor inside `tensors.bin`, in `f32` elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelKind,
    pub config: TrainConfig,
    /// Seed the run was initialized and shuffled from.
    pub seed: u64,
    /// Cross-validation fold, if the run belongs to one.
    pub fold: Option<usize>,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_steps: u64,
    /// Mean training loss of every completed epoch.
    pub losses: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// A resumable training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub seed: u64,
    pub fold: Option<usize>,
}

impl Checkpoint {
    /// Writes the checkpoint into `dir` (created if needed). Values are
    /// stored as their `f32` projection.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut named: Vec<(String, &Array)> = Vec::new();
        let model = &self.state.model;
        let adam = &self.state.adam;
        named.extend(model.params.iter().map(|(n, a)| (format!("{PARAM}{n}"), a)));
        named.extend(adam.m.iter().map(|(n, a)| (format!("{ADAM_M}{n}"), a)));
        named.extend(adam.v.iter().map(|(n, a)| (format!("{ADAM_V}{n}"), a)));
        named.push((NORM_MEAN.into(), &model.normalizer.mean));
        named.push((NORM_STD.into(), &model.normalizer.std));
        let mut state = NamedArrays::new();
        if let Some(s) = &model.initial_state {
            s.insert_into(&mut state);
        }
        named.extend(state.iter().map(|(n, a)| (format!("{STATE}{n}"), a)));

        let mut bytes = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        for (name, a) in named {
            tensors.push(TensorEntry {
                name,
                shape: a.shape().to_vec(),
                offset: bytes.len() / 4,
                len: a.len(),
            });
            bytes.extend(f32le_bytes(a.data()));
        }
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: model.kind(),
            config: model.config.clone(),
            seed: self.seed,
            fold: self.fold,
            epoch: self.state.epoch,
            adam_steps: adam.t,
            losses: self.state.losses.clone(),
            tensors,
        };
        let bin = dir.join(TENSORS_BIN);
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        write_json(&dir.join(CHECKPOINT_JSON), &meta)
    }

    pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
        let path = dir.join(CHECKPOINT_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(
                CHECKPOINT_JSON,
                format!("unsupported format version {}", meta.format_version),
            ));
        }
        if meta.model != meta.config.model {
            return Err(Error::format(CHECKPOINT_JSON, "model kind disagrees with the config echo"));
        }
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = Self::read_meta(dir)?;
        let bin = dir.join(TENSORS_BIN);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut expected_offset = 0;
        let mut all = NamedArrays::new();
        for t in &meta.tensors {
            if t.offset != expected_offset || t.shape.iter().product::<usize>() != t.len {
                return Err(Error::format(TENSORS_BIN, format!("inconsistent index entry `{}`", t.name)));
            }
            expected_offset += t.len;
            let raw = bytes
                .get(4 * t.offset..4 * (t.offset + t.len))
                .ok_or_else(|| Error::format(TENSORS_BIN, format!("file ends inside `{}`", t.name)))?;
            let values = parse_f32le(raw, t.len, &t.name)?;
            if all.insert(t.name.clone(), Array::new(t.shape.clone(), values)?).is_some() {
                return Err(Error::format(CHECKPOINT_JSON, format!("duplicate tensor `{}`", t.name)));
            }
        }
        if 4 * expected_offset != bytes.len() {
            return Err(Error::format(
                TENSORS_BIN,
                format!("expected {} bytes, found {}", 4 * expected_offset, bytes.len()),
            ));
        }

        let take = |all: &mut NamedArrays, prefix: &str| -> NamedArrays {
            let names: Vec<String> = all.keys().filter(|n| n.starts_with(prefix)).cloned().collect();
            names
                .into_iter()
                .map(|n| {
                    let a = all.remove(&n).expect("listed key");
                    (n[prefix.len()..].to_string(), a)
                })
                .collect()
        };
        let params = take(&mut all, PARAM);
        let m = take(&mut all, ADAM_M);
        let v = take(&mut all, ADAM_V);
        let state = take(&mut all, STATE);
        let missing = |n: &str| Error::format(CHECKPOINT_JSON, format!("missing tensor `{n}`"));
        let normalizer = Normalizer {
            mean: all.remove(NORM_MEAN).ok_or_else(|| missing(NORM_MEAN))?,
            std: all.remove(NORM_STD).ok_or_else(|| missing(NORM_STD))?,
        };
        if let Some(extra) = all.keys().next() {
            return Err(Error::format(CHECKPOINT_JSON, format!("unexpected tensor `{extra}`")));
        }
        let config = meta.config.resolved();
        let initial_state = if config.model.has_memory() {
            Some(MemoryState::from_named(&state, config.model == ModelKind::NmnFixed)?)
        } else {
            None
        };
        let model = Model {
            config,
            params,
            initial_state,
            normalizer,
        };
        model.validate()?;
        let same_names = |moments: &NamedArrays| {
            moments.len() == model.params.len()
                && moments.iter().all(|(n, a)| model.params.get(n).is_some_and(|p| p.shape() == a.shape()))
        };
        if !same_names(&m) || !same_names(&v) {
            return Err(Error::format(CHECKPOINT_JSON, "optimizer moments do not match the parameters"));
        }
        if meta.losses.len() != meta.epoch {
            return Err(Error::format(CHECKPOINT_JSON, "loss curve length differs from the epoch count"));
        }
        let adam = Adam {
            config: model.config.adam(),
            t: meta.adam_steps,
            m,
            v,
        };
        Ok(Checkpoint {
            state: TrainState {
                model,
                adam,
                epoch: meta.epoch,
                losses: meta.losses,
            },
            seed: meta.seed,
            fold: meta.fold,
        })
    }
}

/// Loads just the trained model of a checkpoint.
pub fn load_model(dir: &Path) -> Result<Model> {
    Ok(Checkpoint::load(dir)?.state.model)
}

/// Config echo of a checkpoint without reading its tensors.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    Ok(Checkpoint::read_meta(dir)?.config)
}
