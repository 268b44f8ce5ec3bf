//! Supervised training, cross-validation, metrics and embedding export.

pub mod config;
pub mod folds;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pca;
pub mod report;
#[cfg(test)]
pub(crate) mod testkit;
pub mod trainer;

pub use config::{ModelKind, TrainConfig};
pub use model::{Model, Normalizer};
pub use report::{extract_embeddings, EmbeddingSummary, EmbeddingTable, EvalReport, DEFAULT_EMBED_SAMPLES};
pub use trainer::{
    cross_validate, fold_seed, fold_split, map_folds, predict, run_fold, run_fold_from, train_fold, FoldOutcome,
    Predictions, TrainState,
};
