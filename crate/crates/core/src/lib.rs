//! Plastic neural memory network for multi-channel spectral sequence
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode differentiation graph over dense arrays.
//! * [`encoder`]: LSTM cells and the two-layer stacked sample encoder.
//! * [`memory`]: the external memory stack with attention read/write and
//!   Hebbian-plastic controllers.
//! * [`preprocess`]: windowed-FFT band features, dataset files and a
//!   synthetic labelled-signal generator.
//! * [`train`]: models, Adam, stratified cross-validation, metrics and PCA.
//! * [`checkpoint`] and [`config`]: on-disk formats used by the CLI.

pub mod array;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod preprocess;
pub mod train;

pub use array::Array;
pub use error::{Error, Result};

/// Number of montage channels per sample.
pub const CHANNELS: usize = 20;
/// Number of retained frequency bands per channel.
pub const BANDS: usize = 24;
/// Number of seizure-type classes.
pub const CLASSES: usize = 7;

/// Short class names, in label order.
pub const CLASS_NAMES: [&str; CLASSES] = ["FNSZ", "GNSZ", "SPSZ", "CPSZ", "ABSZ", "TNSZ", "TCSZ"];

/// Temporal central parasagittal montage, in channel order.
pub const MONTAGE: [&str; CHANNELS] = [
    "FP1-F7", "F7-T3", "T3-T5", "T5-O1", "FP2-F8", "F8-T4", "T4-T6", "T6-O2", "T3-C3", "C3-CZ",
    "CZ-C4", "C4-T4", "FP1-F3", "F3-C3", "C3-P3", "P3-O1", "FP2-F4", "F4-C4", "C4-P4", "P4-O2",
];
