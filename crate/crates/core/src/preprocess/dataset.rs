use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::signal::{Provenance, RawRecording, Sample};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::{BANDS, CHANNELS, CLASSES};

pub const MANIFEST: &str = "manifest.json";
const DTYPE: &str = "f32le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// One `[20, n_samples]` blob per recording.
    Raw,
    /// One `[n_windows, 20, 24]` blob per recording.
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub patient_id: String,
    #[serde(default)]
    pub seizure_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_windows: Option<usize>,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |id: &str, detail: String| Err(Error::format(format!("manifest entry `{id}`"), detail));
        if self.kind == DatasetKind::Raw && !self.sample_rate.is_some_and(|fs| fs > 0.0) {
            return Err(Error::format("manifest", "raw datasets need a positive sample_rate"));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return bad(&e.id, "duplicate id".into());
            }
            if e.dtype != DTYPE {
                return bad(&e.id, format!("dtype must be `{DTYPE}`, got `{}`", e.dtype));
            }
            if e.label >= CLASSES {
                return bad(&e.id, format!("label {} out of range 0..{CLASSES}", e.label));
            }
            if e.file.contains("..") || Path::new(&e.file).is_absolute() {
                return bad(&e.id, format!("file `{}` must be relative to the dataset", e.file));
            }
            let ok = match self.kind {
                DatasetKind::Raw => e.shape.len() == 2 && e.shape[0] == CHANNELS,
                DatasetKind::Features => {
                    e.shape.len() == 3
                        && e.shape[1..] == [CHANNELS, BANDS]
                        && e.n_windows.is_none_or(|n| n == e.shape[0])
                }
            };
            if !ok {
                return bad(&e.id, format!("unexpected shape {:?}", e.shape));
            }
        }
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes values as 32-bit little-endian floats.
pub fn write_f32le(path: &Path, values: &[f64]) -> Result<()> {
    fs::write(path, f32le_bytes(values)).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Reads exactly `len` 32-bit little-endian floats, rejecting non-finite values.
pub fn read_f32le(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_f32le(&bytes, len, &path.display().to_string())
}

pub(crate) fn parse_f32le(bytes: &[u8], len: usize, what: &str) -> Result<Vec<f64>> {
    if bytes.len() != 4 * len {
        return Err(Error::format(what, format!("expected {} bytes, found {}", 4 * len, bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(values)
}

fn blob_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

/// Writes raw recordings; all must share one sample rate.
pub fn write_raw_dataset(dir: &Path, recordings: &[RawRecording]) -> Result<Manifest> {
    let sample_rate = recordings.first().map(|r| r.sample_rate);
    if recordings.iter().any(|r| Some(r.sample_rate) != sample_rate) {
        return Err(Error::invalid("recordings have mixed sample rates"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(recordings.len());
    for rec in recordings {
        rec.validate()?;
        let file = blob_name(&rec.id);
        write_f32le(&dir.join(&file), rec.channels.data())?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            label: rec.label,
            patient_id: rec.patient_id.clone(),
            seizure_id: rec.seizure_id.clone(),
            n_windows: None,
            dtype: DTYPE.into(),
            shape: vec![CHANNELS, rec.n_samples()],
            file,
        });
    }
    let manifest = Manifest {
        kind: DatasetKind::Raw,
        sample_rate,
        entries,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

pub fn read_raw_dataset(dir: &Path) -> Result<Vec<RawRecording>> {
    let manifest = Manifest::read(dir)?;
    if manifest.kind != DatasetKind::Raw {
        return Err(Error::format("manifest", "expected a raw dataset"));
    }
    let sample_rate = manifest.sample_rate.unwrap_or_default();
    manifest
        .entries
        .iter()
        .map(|e| {
            let data = read_f32le(&dir.join(&e.file), e.shape.iter().product())?;
            let rec = RawRecording {
                id: e.id.clone(),
                channels: Array::new(e.shape.clone(), data)?,
                sample_rate,
                label: e.label,
                patient_id: e.patient_id.clone(),
                seizure_id: e.seizure_id.clone(),
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// Writes samples grouped by recording; windows of one recording must be
/// contiguous and in window order.
pub fn write_feature_dataset(dir: &Path, samples: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let head = &samples[start].provenance;
        let end = start
            + samples[start..]
                .iter()
                .take_while(|s| s.provenance.recording_id == head.recording_id)
                .count();
        let group = &samples[start..end];
        if entries.iter().any(|e| e.id == head.recording_id) {
            return Err(Error::invalid(format!("windows of `{}` are not contiguous", head.recording_id)));
        }
        let mut data = Vec::with_capacity(group.len() * CHANNELS * BANDS);
        for (w, s) in group.iter().enumerate() {
            if s.provenance.window_index != w || s.label != samples[start].label {
                return Err(Error::invalid(format!("`{}` windows out of order or mixed labels", head.recording_id)));
            }
            if s.features.shape() != [CHANNELS, BANDS] {
                return Err(Error::shape(s.id(), format!("expected [20, 24], got {:?}", s.features.shape())));
            }
            data.extend_from_slice(s.features.data());
        }
        let file = blob_name(&head.recording_id);
        write_f32le(&dir.join(&file), &data)?;
        entries.push(ManifestEntry {
            id: head.recording_id.clone(),
            label: samples[start].label,
            patient_id: head.patient_id.clone(),
            seizure_id: head.seizure_id.clone(),
            n_windows: Some(group.len()),
            dtype: DTYPE.into(),
            shape: vec![group.len(), CHANNELS, BANDS],
            file,
        });
        start = end;
    }
    let manifest = Manifest {
        kind: DatasetKind::Features,
        sample_rate: None,
        entries,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

pub fn read_feature_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(dir)?;
    if manifest.kind != DatasetKind::Features {
        return Err(Error::format("manifest", "expected a features dataset (run preprocess first)"));
    }
    let mut samples = Vec::new();
    for e in &manifest.entries {
        let data = read_f32le(&dir.join(&e.file), e.shape.iter().product())?;
        for (w, chunk) in data.chunks_exact(CHANNELS * BANDS).enumerate() {
            samples.push(Sample {
                features: Array::new(vec![CHANNELS, BANDS], chunk.to_vec())?,
                label: e.label,
                provenance: Provenance {
                    recording_id: e.id.clone(),
                    patient_id: e.patient_id.clone(),
                    seizure_id: e.seizure_id.clone(),
                    window_index: w,
                },
            });
        }
    }
    Ok(samples)
}
