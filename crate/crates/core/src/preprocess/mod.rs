pub mod dataset;
pub mod signal;
pub mod synth;

pub use dataset::*;
pub use signal::*;
pub use synth::*;
