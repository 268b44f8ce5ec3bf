use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::signal::{RawRecording, DEFAULT_SAMPLE_RATE};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::{CHANNELS, CLASSES, CLASS_NAMES};

/// Data-sample totals per class in the reference corpus, label order.
pub const REFERENCE_SAMPLES: [u64; CLASSES] = [292_725, 137_033, 6_028, 132_200, 3_087, 4_888, 22_524];

/// Default synthetic recording length.
pub const DEFAULT_DURATION_SECONDS: f64 = 10.0;

/// Recording count giving roughly 10^4 windows at 37 windows per recording.
pub const DEFAULT_RECORDINGS: usize = 270;

/// Signal model for one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Oscillation frequencies in Hz; each must lie in `(0, 25)`.
    pub center_frequencies: Vec<f64>,
    /// Per-channel gain applied to every oscillation.
    pub topography: Vec<f64>,
    pub amplitude: f64,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
    /// Each recording draws its frequencies uniformly within `±frequency_jitter`.
    #[serde(default)]
    pub frequency_jitter: f64,
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("class spec `{}`: {what}", self.name)));
        if self.center_frequencies.is_empty() {
            return bad("no center frequencies");
        }
        if self.topography.len() != CHANNELS {
            return bad(&format!("topography needs {CHANNELS} weights, got {}", self.topography.len()));
        }
        if !self.topography.iter().all(|w| w.is_finite()) {
            return bad("non-finite topography weight");
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return bad("amplitude must be finite and >= 0");
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad("noise level must be finite and >= 0");
        }
        if !(self.frequency_jitter.is_finite() && self.frequency_jitter >= 0.0) {
            return bad("frequency jitter must be finite and >= 0");
        }
        for &f in &self.center_frequencies {
            if !(f - self.frequency_jitter > 0.0 && f + self.frequency_jitter < 25.0) {
                return bad(&format!("frequency {f} Hz (jitter {}) leaves (0, 25) Hz", self.frequency_jitter));
            }
        }
        Ok(())
    }
}

fn topography(active: &[usize], on: f64, off: f64) -> Vec<f64> {
    (0..CHANNELS).map(|c| if active.contains(&c) { on } else { off }).collect()
}

/// Seven well-separated classes: distinct spectral peaks, focal classes
/// concentrated on a hemisphere, generalized classes spread over the montage.
pub fn default_class_specs() -> Vec<ClassSpec> {
    let left = [0, 1, 2, 3, 8, 12, 13, 14, 15];
    let right = [4, 5, 6, 7, 11, 16, 17, 18, 19];
    let temporal = [1, 2, 5, 6, 8, 11];
    let all: Vec<usize> = (0..CHANNELS).collect();
    let specs = [
        (vec![5.0], topography(&left, 1.0, 0.2)),
        (vec![8.0], topography(&all, 1.0, 1.0)),
        (vec![11.0], topography(&right, 1.0, 0.2)),
        (vec![14.0, 7.0], topography(&temporal, 1.0, 0.3)),
        (vec![3.0], topography(&all, 1.2, 1.2)),
        (vec![20.0], topography(&all, 0.8, 0.8)),
        (vec![17.0, 4.0], topography(&all, 1.0, 1.0)),
    ];
    specs
        .into_iter()
        .zip(CLASS_NAMES)
        .map(|((center_frequencies, topography), name)| ClassSpec {
            name: name.to_string(),
            center_frequencies,
            topography,
            amplitude: 1.0,
            noise_level: 1.0,
            frequency_jitter: 0.3,
        })
        .collect()
}

/// Seven overlapping classes: peaks 1 Hz apart (8 to 14 Hz), a shared
/// topography, heavy noise and jitter comparable to the peak spacing.
pub fn hard_class_specs() -> Vec<ClassSpec> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| ClassSpec {
            name: name.to_string(),
            center_frequencies: vec![8.0 + i as f64],
            topography: vec![1.0; CHANNELS],
            amplitude: 1.0,
            noise_level: HARD_NOISE_LEVEL,
            frequency_jitter: HARD_FREQUENCY_JITTER,
        })
        .collect()
}

pub const HARD_NOISE_LEVEL: f64 = 6.0;
pub const HARD_FREQUENCY_JITTER: f64 = 0.5;

/// Splits `total` recordings across classes in proportion to `weights`
/// (largest remainder), with at least one recording per class.
pub fn proportional_counts(weights: &[u64], total: usize) -> Result<Vec<usize>> {
    if weights.is_empty() || weights.contains(&0) {
        return Err(Error::invalid("class weights must be non-empty and positive"));
    }
    if total < weights.len() {
        return Err(Error::invalid(format!("need at least {} recordings, got {total}", weights.len())));
    }
    let sum: u64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / sum as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| (e.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle() {
        if assigned >= total {
            break;
        }
        counts[i] += 1;
        assigned += 1;
    }
    // the minimum-one rule can overshoot; take back from the largest classes
    while assigned > total {
        let i = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        counts[i] -= 1;
        assigned -= 1;
    }
    Ok(counts)
}

/// Reference-corpus-proportional counts for the default recording total.
pub fn default_counts() -> Vec<usize> {
    proportional_counts(&REFERENCE_SAMPLES, DEFAULT_RECORDINGS).expect("static weights are valid")
}

/// Generates `counts[c]` recordings of class `c` with the default duration
/// and sample rate.
pub fn synth_generate(specs: &[ClassSpec], counts: &[usize], seed: u64) -> Result<Vec<RawRecording>> {
    synth_recordings(specs, counts, seed, DEFAULT_DURATION_SECONDS, DEFAULT_SAMPLE_RATE)
}

/// Each recording is a sum of class oscillations (random phase, per-recording
/// gain in `[0.8, 1.2]`, jittered frequency) times the channel topography,
/// plus white Gaussian noise. Recordings are interleaved across classes.
pub fn synth_recordings(
    specs: &[ClassSpec],
    counts: &[usize],
    seed: u64,
    duration_seconds: f64,
    sample_rate: f64,
) -> Result<Vec<RawRecording>> {
    if specs.is_empty() {
        return Err(Error::invalid("no class specs"));
    }
    if specs.len() > CLASSES {
        return Err(Error::invalid(format!("at most {CLASSES} classes, got {}", specs.len())));
    }
    if counts.len() != specs.len() {
        return Err(Error::invalid(format!("{} counts for {} class specs", counts.len(), specs.len())));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("every class needs at least one recording"));
    }
    for spec in specs {
        spec.validate()?;
    }
    if !(sample_rate > 0.0 && duration_seconds > 0.0) {
        return Err(Error::invalid("duration and sample rate must be > 0"));
    }
    let n = (duration_seconds * sample_rate).round() as usize;

    let mut labels = Vec::new();
    let most = counts.iter().copied().max().unwrap_or(0);
    for round in 0..most {
        labels.extend((0..counts.len()).filter(|&c| round < counts[c]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = vec![0usize; specs.len()];
    labels
        .into_iter()
        .enumerate()
        .map(|(r, label)| {
            let spec = &specs[label];
            let mut data = vec![0.0; CHANNELS * n];
            for &center in &spec.center_frequencies {
                let freq = center + spec.frequency_jitter * rng.random_range(-1.0..=1.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let gain = spec.amplitude * rng.random_range(0.8..=1.2);
                let wave: Vec<f64> = (0..n)
                    .map(|t| gain * (2.0 * PI * freq * t as f64 / sample_rate + phase).sin())
                    .collect();
                for (row, &w) in data.chunks_exact_mut(n).zip(&spec.topography) {
                    for (x, s) in row.iter_mut().zip(&wave) {
                        *x += w * s;
                    }
                }
            }
            if spec.noise_level > 0.0 {
                for x in &mut data {
                    let z: f64 = rng.sample(StandardNormal);
                    *x += spec.noise_level * z;
                }
            }
            let index = per_class[label];
            per_class[label] += 1;
            Ok(RawRecording {
                id: format!("rec{r:04}"),
                channels: Array::new(vec![CHANNELS, n], data)?,
                sample_rate,
                label,
                patient_id: format!("p{:02}", r % 40),
                seizure_id: format!("{}-{index:03}", spec.name),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::signal::{fft_bands, preprocess};
    use crate::BANDS;

    fn single_tone(freq: f64) -> ClassSpec {
        let mut topo = vec![0.0; CHANNELS];
        topo[3] = 1.0;
        topo[7] = 0.5;
        ClassSpec {
            name: "tone".into(),
            center_frequencies: vec![freq],
            topography: topo,
            amplitude: 1.0,
            noise_level: 0.0,
            frequency_jitter: 0.0,
        }
    }

    #[test]
    fn noise_free_tone_peaks_at_its_band() {
        let recs = synth_generate(&[single_tone(5.0)], &[1], 1).unwrap();
        let rec = &recs[0];
        assert_eq!(rec.n_samples(), 2500);
        for ch in [3, 7] {
            let bands = fft_bands(&rec.channels.row_slice(ch)[..250], 250.0, BANDS).unwrap();
            let peak = (0..BANDS).max_by(|&a, &b| bands[a].total_cmp(&bands[b])).unwrap();
            assert_eq!(peak + 1, 5, "channel {ch}: {bands:?}");
        }
        let silent = fft_bands(&rec.channels.row_slice(0)[..250], 250.0, BANDS).unwrap();
        assert!(silent.iter().all(|&v| v == -8.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let specs = default_class_specs();
        let counts = vec![2; CLASSES];
        let a = synth_generate(&specs, &counts, 9).unwrap();
        let b = synth_generate(&specs, &counts, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&specs, &counts, 10).unwrap();
        assert_ne!(a[0].channels, c[0].channels);
    }

    #[test]
    fn default_counts_track_reference_proportions() {
        let counts = default_counts();
        assert_eq!(counts.iter().sum::<usize>(), DEFAULT_RECORDINGS);
        let total: u64 = REFERENCE_SAMPLES.iter().sum();
        for (c, &w) in counts.iter().zip(&REFERENCE_SAMPLES) {
            let exact = w as f64 * DEFAULT_RECORDINGS as f64 / total as f64;
            assert!((*c as f64 - exact).abs() <= 1.0, "{c} vs {exact}");
            assert!(*c >= 1);
        }
        // FNSZ dominates ABSZ by the reference ratio up to one recording
        let ratio = REFERENCE_SAMPLES[0] as f64 / REFERENCE_SAMPLES[4] as f64;
        assert!((counts[0] as f64 - ratio * counts[4] as f64).abs() <= ratio);
        assert_eq!(counts, [132, 62, 3, 60, 1, 2, 10]);
    }

    #[test]
    fn proportional_counts_edge_cases() {
        assert_eq!(proportional_counts(&[1, 1], 5).unwrap().iter().sum::<usize>(), 5);
        assert_eq!(proportional_counts(&[1000, 1], 3).unwrap(), [2, 1]);
        assert!(proportional_counts(&[1, 1, 1], 2).is_err());
        assert!(proportional_counts(&[], 2).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_generate(&[], &[], 0).is_err());
        assert!(synth_generate(&[single_tone(5.0)], &[0], 0).is_err());
        assert!(synth_generate(&[single_tone(30.0)], &[1], 0).is_err());
        let mut short = single_tone(5.0);
        short.topography.pop();
        assert!(synth_generate(&[short], &[1], 0).is_err());
    }

    #[test]
    fn recordings_carry_labels_and_unique_ids() {
        let recs = synth_generate(&default_class_specs(), &[3, 2, 1, 1, 1, 1, 1], 4).unwrap();
        assert_eq!(recs.len(), 10);
        let mut per_class = [0; CLASSES];
        for rec in &recs {
            rec.validate().unwrap();
            per_class[rec.label] += 1;
        }
        assert_eq!(per_class, [3, 2, 1, 1, 1, 1, 1]);
        let mut ids: Vec<_> = recs.iter().map(|r| &r.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    fn mean_band_profile(rec: &RawRecording) -> Vec<f64> {
        let samples = preprocess(rec).unwrap();
        let mut profile = [0.0; BANDS];
        for s in &samples {
            for (b, p) in profile.iter_mut().enumerate() {
                // back from log magnitude to power
                *p += (0..CHANNELS).map(|c| 10f64.powf(2.0 * s.features.at(c, b))).sum::<f64>();
            }
        }
        let scale = (samples.len() * CHANNELS) as f64;
        profile.iter().map(|p| p / scale).collect()
    }

    fn nearest_centroid_accuracy(specs: &[ClassSpec]) -> f64 {
        let counts = vec![6; specs.len()];
        let train = synth_generate(specs, &counts, 100).unwrap();
        let test = synth_generate(specs, &counts, 200).unwrap();
        let mut centroids = vec![vec![0.0; BANDS]; specs.len()];
        for rec in &train {
            for (c, p) in centroids[rec.label].iter_mut().zip(mean_band_profile(rec)) {
                *c += p / 6.0;
            }
        }
        let correct = test
            .iter()
            .filter(|rec| {
                let p = mean_band_profile(rec);
                let dist = |c: &Vec<f64>| c.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..centroids.len())
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == rec.label
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn noise_free_classes_are_separable() {
        let hard_fixed: Vec<ClassSpec> = hard_class_specs()
            .into_iter()
            .map(|s| ClassSpec { frequency_jitter: 0.0, ..s })
            .collect();
        for specs in [default_class_specs(), hard_fixed] {
            let quiet: Vec<ClassSpec> = specs.into_iter().map(|s| ClassSpec { noise_level: 0.0, ..s }).collect();
            let acc = nearest_centroid_accuracy(&quiet);
            assert!(acc >= 0.99, "accuracy {acc}");
        }
    }
}
