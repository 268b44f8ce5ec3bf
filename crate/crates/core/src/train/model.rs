use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelKind, TrainConfig};
use crate::array::Array;
use crate::autodiff::{Feeds, Graph, NamedArrays, NodeId};
use crate::encoder::{encode_batch, LstmNodes, StackedEncoder};
use crate::error::{Error, Result};
use crate::memory::{record_memory_step, ControllerParams, MemoryState, StateNodes};
use crate::preprocess::Sample;
use crate::{BANDS, CHANNELS, CLASSES};

pub const READOUT_W: &str = "readout.w";
pub const READOUT_B: &str = "readout.b";
const BATCH_X: &str = "batch.x";
const BATCH_TARGET: &str = "batch.target";

/// Per-feature standardization fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    /// `20 × 24` feature means.
    pub mean: Array,
    /// `20 × 24` feature standard deviations (never zero).
    pub std: Array,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: Array::zeros(&[CHANNELS, BANDS]),
            std: Array::filled(&[CHANNELS, BANDS], 1.0),
        }
    }

    /// Mean and population standard deviation of every feature; constant
    /// features keep unit scale.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; CHANNELS * BANDS];
        let mut sq = vec![0.0; CHANNELS * BANDS];
        for s in samples {
            if s.features.shape() != [CHANNELS, BANDS] {
                return Err(Error::shape(s.id(), format!("expected [20, 24], got {:?}", s.features.shape())));
            }
            n += 1;
            for ((a, b), &x) in sum.iter_mut().zip(&mut sq).zip(s.features.data()) {
                *a += x;
                *b += x * x;
            }
        }
        if n == 0 {
            return Err(Error::invalid("cannot fit normalization on zero samples"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var.sqrt() > 1e-8 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer {
            mean: Array::new(vec![CHANNELS, BANDS], mean)?,
            std: Array::new(vec![CHANNELS, BANDS], std)?,
        })
    }

    pub fn project_f32(&mut self) {
        self.mean.project_f32();
        self.std.project_f32();
    }
}

/// A classifier: parameters, the memory state every pass starts from, and
/// the input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub params: NamedArrays,
    /// Starting memory state (memory-network kinds only).
    pub initial_state: Option<MemoryState>,
    pub normalizer: Normalizer,
}

impl Model {
    /// Fresh parameters and initial memory drawn from `seed`.
    pub fn init(config: &TrainConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.k;
        let mut params = NamedArrays::new();
        StackedEncoder::init(k, &mut rng).insert_into(&mut params);
        let controllers = match config.model {
            ModelKind::PlasticNmn => Some(ControllerParams::plastic_init(k, config.eta, &mut rng)),
            ModelKind::NmnFixed => Some(ControllerParams::lstm_init(k, &mut rng)),
            ModelKind::LstmBaseline => None,
        };
        if let Some(c) = &controllers {
            c.insert_into(&mut params);
        }
        params.insert(READOUT_W.into(), Array::uniform(&[k, CLASSES], 1.0 / (k as f64).sqrt(), &mut rng));
        params.insert(READOUT_B.into(), Array::zeros(&[1, CLASSES]));
        let initial_state = controllers.map(|c| {
            MemoryState::random(config.l, k, config.init_memory, !c.is_plastic(), &mut rng)
        });
        Ok(Model {
            config: config.resolved(),
            params,
            initial_state,
            normalizer,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    /// Expected parameter names and shapes for this model's config.
    pub fn expected_shapes(config: &TrainConfig) -> Vec<(String, Vec<usize>)> {
        let k = config.k;
        let mut out = Vec::new();
        let mut lstm = |prefix: String, input: usize| {
            let [wi, wr, b] = crate::encoder::LstmParams::param_names(&prefix);
            out.push((wi, vec![input, 4 * k]));
            out.push((wr, vec![k, 4 * k]));
            out.push((b, vec![1, 4 * k]));
        };
        lstm(StackedEncoder::layer_prefix(0), BANDS);
        lstm(StackedEncoder::layer_prefix(1), k);
        match config.model {
            ModelKind::NmnFixed => {
                for c in ["input", "output", "update"] {
                    lstm(format!("memory.{c}"), k);
                }
                for c in ["output", "update"] {
                    out.push((format!("memory.{c}.w_skip"), vec![k, 4 * k]));
                }
            }
            ModelKind::PlasticNmn => {
                for c in ["input", "output", "update"] {
                    out.push((format!("memory.{c}.w"), vec![k, k]));
                    out.push((format!("memory.{c}.alpha"), vec![k, k]));
                }
            }
            ModelKind::LstmBaseline => {}
        }
        out.push((READOUT_W.into(), vec![k, CLASSES]));
        out.push((READOUT_B.into(), vec![1, CLASSES]));
        out.sort();
        out
    }

    /// Checks parameter names, shapes, finiteness and the memory state.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config);
        let actual: Vec<(String, Vec<usize>)> =
            self.params.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect();
        if expected != actual {
            return Err(Error::invalid(format!(
                "parameter set does not match a {} model with k={}",
                self.kind(),
                self.config.k
            )));
        }
        if let Some((name, _)) = self.params.iter().find(|(_, a)| !a.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
        match (&self.initial_state, self.kind()) {
            (None, ModelKind::LstmBaseline) => {}
            (Some(s), kind) if kind.has_memory() => {
                let lstm = kind == ModelKind::NmnFixed;
                let (l, k) = (self.config.l, self.config.k);
                let ok = s.memory.dims2() == (l, k)
                    && s.traces().iter().all(|t| t.dims2() == (k, k))
                    && s.controllers.len() == if lstm { 3 } else { 0 }
                    && s.controllers.iter().all(|c| c.h.dims2() == (1, k) && c.c.dims2() == (1, k));
                if !ok {
                    return Err(Error::invalid("initial memory state does not match the model shape"));
                }
                if !s.is_finite() {
                    return Err(Error::NonFinite("initial memory state".into()));
                }
            }
            _ => return Err(Error::invalid("memory state present iff the model has memory")),
        }
        Ok(())
    }

    /// Rounds everything stored on disk through `f32`.
    pub fn project_f32(&mut self) {
        for a in self.params.values_mut() {
            a.project_f32();
        }
        if let Some(s) = &mut self.initial_state {
            s.project_f32();
        }
        self.normalizer.project_f32();
    }
}

/// A recorded forward graph for one batch size.
pub struct BatchGraph {
    graph: Graph,
    batch: usize,
    loss: NodeId,
    logits: NodeId,
    embedding: NodeId,
    state_out: Option<StateNodes>,
}

impl BatchGraph {
    pub fn build(model: &Model, batch: usize) -> Result<Self> {
        let k = model.config.k;
        let mut g = Graph::new();
        let encoder = [
            LstmNodes::declare(&mut g, &StackedEncoder::layer_prefix(0), BANDS, k)?,
            LstmNodes::declare(&mut g, &StackedEncoder::layer_prefix(1), k, k)?,
        ];
        let x = g.input(BATCH_X, &[CHANNELS * batch, BANDS])?;
        let target = g.input(BATCH_TARGET, &[batch, CLASSES])?;
        let encoded = encode_batch(&mut g, &encoder, x, CHANNELS, batch)?;

        let (embedding, state_out) = if model.kind().has_memory() {
            let ctrl = ControllerParams::from_named(model.kind() == ModelKind::PlasticNmn, model.config.eta, &model.params)?
                .declare(&mut g)?;
            let mut state = StateNodes::declare(&mut g, model.config.l, k, model.kind() == ModelKind::NmnFixed)?;
            let mut outputs = Vec::with_capacity(batch);
            for b in 0..batch {
                let xb = g.row(encoded, b)?;
                let (step, next) = record_memory_step(&mut g, &ctrl, xb, &state)?;
                outputs.push(step.output);
                state = next;
            }
            (g.concat_rows(&outputs)?, Some(state))
        } else {
            (encoded, None)
        };

        let w = g.param(READOUT_W, &[k, CLASSES])?;
        let b = g.param(READOUT_B, &[1, CLASSES])?;
        let projected = g.matmul(embedding, w)?;
        let logits = g.add_row(projected, b)?;
        let log_probs = g.log_softmax(logits);
        let picked = g.mul(log_probs, target)?;
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0 / batch as f64);
        Ok(BatchGraph {
            graph: g,
            batch,
            loss,
            logits,
            embedding,
            state_out,
        })
    }
}

/// Results of one batch pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// `batch × 7`.
    pub logits: Array,
    /// `batch × k` classification features.
    pub embeddings: Array,
    /// Memory state after the last sample of the batch.
    pub state: Option<MemoryState>,
}

/// Runs batches through cached graphs (one per batch size).
#[derive(Default)]
pub struct Runner {
    graphs: HashMap<usize, BatchGraph>,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward pass over `samples` in order starting from `state`; with
    /// `gradients` also returns the parameter gradients of the mean loss.
    pub fn run(
        &mut self,
        model: &Model,
        samples: &[&Sample],
        state: Option<&MemoryState>,
        gradients: bool,
    ) -> Result<(BatchOutput, Option<NamedArrays>)> {
        let batch = samples.len();
        if batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if model.kind().has_memory() != state.is_some() {
            return Err(Error::invalid("memory state must be given exactly for memory models"));
        }
        if !self.graphs.contains_key(&batch) {
            self.graphs.insert(batch, BatchGraph::build(model, batch)?);
        }
        let bg = self.graphs.get_mut(&batch).expect("inserted above");
        debug_assert_eq!(bg.batch, batch);

        let x = pack_normalized(samples, &model.normalizer)?;
        let mut target = Array::zeros(&[batch, CLASSES]);
        for (b, s) in samples.iter().enumerate() {
            if s.label >= CLASSES {
                return Err(Error::invalid(format!("sample {} has label {}", s.id(), s.label)));
            }
            target.set(b, s.label, 1.0);
        }
        let mut feeds = Feeds::new();
        feeds.extend(&model.params).insert(BATCH_X, &x).insert(BATCH_TARGET, &target);
        if let Some(s) = state {
            s.feed(&mut feeds);
        }
        bg.graph.forward(&feeds)?;
        let g = &bg.graph;
        let loss = g.value(bg.loss).data()[0];
        let output = BatchOutput {
            loss,
            logits: g.value(bg.logits).clone(),
            embeddings: g.value(bg.embedding).clone(),
            state: bg.state_out.as_ref().map(|n| MemoryState::from_graph(g, n)),
        };
        let grads = if gradients {
            Some(bg.graph.backward(bg.loss, &Array::scalar(1.0))?)
        } else {
            None
        };
        Ok((output, grads))
    }
}

/// Normalizes and packs samples step-major: row `s·B + b` is channel `s`
/// of sample `b`.
fn pack_normalized(samples: &[&Sample], norm: &Normalizer) -> Result<Array> {
    let batch = samples.len();
    let mut data = vec![0.0; CHANNELS * batch * BANDS];
    for (b, s) in samples.iter().enumerate() {
        if s.features.shape() != [CHANNELS, BANDS] {
            return Err(Error::shape(s.id(), format!("expected [20, 24], got {:?}", s.features.shape())));
        }
        for ch in 0..CHANNELS {
            let dst = (ch * batch + b) * BANDS;
            let src = ch * BANDS;
            for j in 0..BANDS {
                data[dst + j] = (s.features.data()[src + j] - norm.mean.data()[src + j]) / norm.std.data()[src + j];
            }
        }
    }
    Array::matrix(CHANNELS * batch, BANDS, data)
}
