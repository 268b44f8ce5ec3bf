//! Small datasets and configs shared by unit tests.

use super::config::{ModelKind, TrainConfig};
use crate::preprocess::{preprocess, synth_generate, ClassSpec, Sample};
use crate::CHANNELS;

pub fn tone(name: &str, freq: f64, noise: f64) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        center_frequencies: vec![freq],
        topography: vec![1.0; CHANNELS],
        amplitude: 1.0,
        noise_level: noise,
        frequency_jitter: 0.0,
    }
}

/// Two classes (4 Hz vs 12 Hz), two recordings each.
pub fn toy(noise: f64, seed: u64) -> Vec<Sample> {
    let specs = [tone("a", 4.0, noise), tone("b", 12.0, noise)];
    synth_generate(&specs, &[2, 2], seed)
        .unwrap()
        .iter()
        .flat_map(|r| preprocess(r).unwrap())
        .collect()
}

pub fn tiny(model: ModelKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        model,
        k: 8,
        l: 4,
        epochs: Some(epochs),
        batch: 16,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}
