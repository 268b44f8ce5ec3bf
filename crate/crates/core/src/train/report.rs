use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelKind;
use super::metrics::{accuracy, class_stats, confusion_matrix, weighted_f1};
use super::model::Model;
use super::pca::pca_top2;
use super::trainer::{predict, FoldOutcome, Predictions};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::preprocess::dataset::write_json;
use crate::preprocess::Sample;
use crate::{CLASSES, CLASS_NAMES};

pub const DEFAULT_EMBED_SAMPLES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Sampled embeddings projected onto their top two principal components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
    pub explained_variance: [f64; 2],
    /// Nearest-centroid accuracy in the 2-D projection.
    pub centroid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    /// Weighted F1 of each evaluated fold (a single entry for a plain eval).
    pub fold_weighted_f1: Vec<f64>,
    pub mean_weighted_f1: f64,
    /// Weighted F1 over all folds' predictions pooled.
    pub pooled_weighted_f1: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class: Vec<ClassReport>,
    /// Row-normalized, rows = actual class.
    pub confusion: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingTable>,
}

impl EvalReport {
    /// Aggregates one or more evaluated parts (folds).
    pub fn from_parts(model: ModelKind, parts: &[&Predictions]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("nothing to report"));
        }
        let fold_weighted_f1 = parts
            .iter()
            .map(|p| weighted_f1(&p.predicted, &p.labels, CLASSES))
            .collect::<Result<Vec<_>>>()?;
        let predicted: Vec<usize> = parts.iter().flat_map(|p| p.predicted.iter().copied()).collect();
        let labels: Vec<usize> = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let stats = class_stats(&predicted, &labels, CLASSES)?;
        let confusion = confusion_matrix(&predicted, &labels, CLASSES)?;
        let n: usize = parts.iter().map(|p| p.labels.len()).sum();
        Ok(EvalReport {
            model,
            mean_weighted_f1: fold_weighted_f1.iter().sum::<f64>() / fold_weighted_f1.len() as f64,
            fold_weighted_f1,
            pooled_weighted_f1: weighted_f1(&predicted, &labels, CLASSES)?,
            accuracy: accuracy(&predicted, &labels),
            mean_loss: parts.iter().map(|p| p.loss * p.labels.len() as f64).sum::<f64>() / n as f64,
            per_class: stats
                .iter()
                .zip(CLASS_NAMES)
                .map(|(s, name)| ClassReport {
                    class: name.to_string(),
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    support: s.support,
                })
                .collect(),
            confusion: (0..CLASSES).map(|r| confusion.row_slice(r).to_vec()).collect(),
            embeddings: None,
        })
    }

    pub fn from_folds(outcomes: &[FoldOutcome]) -> Result<Self> {
        let kind = outcomes
            .first()
            .ok_or_else(|| Error::invalid("no folds to report"))?
            .state
            .model
            .kind();
        let parts: Vec<&Predictions> = outcomes.iter().map(|o| &o.predictions).collect();
        Self::from_parts(kind, &parts)
    }

    /// Writes `report.json`, `confusion.csv`, `per_class.csv` and, when
    /// present, `embeddings.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;

        let mut header = vec!["actual".to_string()];
        header.extend(CLASS_NAMES.iter().map(|c| c.to_string()));
        let mut rows = vec![header];
        for (name, row) in CLASS_NAMES.iter().zip(&self.confusion) {
            let mut r = vec![name.to_string()];
            r.extend(row.iter().map(|v| v.to_string()));
            rows.push(r);
        }
        write_csv(&dir.join("confusion.csv"), rows)?;

        let mut w = csv_writer(&dir.join("per_class.csv"))?;
        for r in &self.per_class {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("per_class.csv"), e))?;

        if let Some(table) = &self.embeddings {
            table.write_csv(&dir.join("embeddings.csv"))?;
        }
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn write_csv(path: &Path, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary written next to `embeddings.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub samples: usize,
    pub explained_variance: [f64; 2],
    pub centroid_accuracy: f64,
}

impl EmbeddingTable {
    pub fn summary(&self) -> EmbeddingSummary {
        EmbeddingSummary {
            samples: self.rows.len(),
            explained_variance: self.explained_variance,
            centroid_accuracy: self.centroid_accuracy,
        }
    }

    /// Writes `embeddings.csv` and `embeddings.json` (the summary) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join("embeddings.csv"))?;
        write_json(&dir.join("embeddings.json"), &self.summary())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fraction of points whose nearest class centroid (Euclidean) is their own.
pub fn nearest_centroid_accuracy(coords: &Array, labels: &[usize]) -> f64 {
    let (n, d) = coords.dims2();
    if n == 0 {
        return 0.0;
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, &x) in centroids[l].iter_mut().zip(coords.row_slice(i)) {
            *c += x;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let p = coords.row_slice(i);
            let dist = |c: &[f64]| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("at least one class present");
            best == l
        })
        .count();
    hits as f64 / n as f64
}

/// Draws up to `n` samples without replacement (seeded), runs them through
/// the model in draw order and projects their embeddings with PCA. Returns
/// whether fewer than `n` samples were available.
pub fn extract_embeddings(model: &Model, samples: &[&Sample], n: usize, seed: u64) -> Result<(EmbeddingTable, bool)> {
    let short = n > samples.len();
    if short {
        log::warn!("requested {n} embeddings but only {} samples are available; using all", samples.len());
    }
    let take = n.min(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<&Sample> = sample_indices(&mut rng, samples.len(), take)
        .into_iter()
        .map(|i| samples[i])
        .collect();
    let predictions = predict(model, &chosen)?;
    let pca = pca_top2(&predictions.embeddings)?;
    let rows = chosen
        .iter()
        .enumerate()
        .map(|(i, s)| EmbeddingRow {
            id: s.id(),
            label: s.label,
            pc1: pca.coords.at(i, 0),
            pc2: pca.coords.at(i, 1),
        })
        .collect();
    Ok((
        EmbeddingTable {
            rows,
            explained_variance: [pca.explained[0], pca.explained[1]],
            centroid_accuracy: nearest_centroid_accuracy(&pca.coords, &predictions.labels),
        },
        short,
    ))
}
