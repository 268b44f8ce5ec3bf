use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::{BANDS, CHANNELS, CLASSES};

/// Floor added to DFT magnitudes before taking `log10`.
pub const LOG_FLOOR: f64 = 1e-8;
pub const DEFAULT_SAMPLE_RATE: f64 = 250.0;
pub const WINDOW_SECONDS: f64 = 1.0;
pub const OVERLAP_FRACTION: f64 = 0.75;

/// A multi-channel recording, channels in montage order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub id: String,
    /// `20 × n_samples`.
    pub channels: Array,
    pub sample_rate: f64,
    pub label: usize,
    pub patient_id: String,
    pub seizure_id: String,
}

impl RawRecording {
    pub fn n_samples(&self) -> usize {
        self.channels.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.rows() != CHANNELS || self.channels.shape().len() != 2 {
            return Err(Error::shape(
                format!("recording `{}`", self.id),
                format!("expected {CHANNELS} channels, got shape {:?}", self.channels.shape()),
            ));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::invalid(format!("recording `{}`: sample rate must be > 0", self.id)));
        }
        if self.label >= CLASSES {
            return Err(Error::invalid(format!("recording `{}`: label {} out of range", self.id, self.label)));
        }
        Ok(())
    }
}

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub recording_id: String,
    pub patient_id: String,
    pub seizure_id: String,
    pub window_index: usize,
}

/// One preprocessed window: `channels × bands` log-magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Array,
    pub label: usize,
    pub provenance: Provenance,
}

impl Sample {
    /// Stable identifier `<recording>#<window>`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.provenance.recording_id, self.provenance.window_index)
    }
}

/// Window length, hop and count for `n` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub length: usize,
    pub hop: usize,
    pub count: usize,
}

impl WindowPlan {
    /// `length = round(w·fs)`, `hop = floor((1 - overlap)·w·fs)`,
    /// `count = floor((n - length) / hop) + 1`.
    pub fn new(n: usize, sample_rate: f64, window_seconds: f64, overlap_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap_fraction) || !(window_seconds > 0.0) {
            return Err(Error::invalid(format!(
                "window {window_seconds}s with overlap {overlap_fraction} is not usable"
            )));
        }
        let length = (window_seconds * sample_rate).round() as usize;
        let hop = ((1.0 - overlap_fraction) * window_seconds * sample_rate).floor() as usize;
        if length == 0 || hop == 0 {
            return Err(Error::invalid("window length and hop must be at least one sample"));
        }
        if n < length {
            return Err(Error::invalid(format!(
                "recording of {n} samples is shorter than one {length}-sample window"
            )));
        }
        Ok(WindowPlan {
            length,
            hop,
            count: (n - length) / hop + 1,
        })
    }
}

/// Splits a recording into overlapping windows, each `channels × length`.
pub fn window_signal(recording: &RawRecording, window_seconds: f64, overlap_fraction: f64) -> Result<Vec<Array>> {
    recording.validate()?;
    let n = recording.n_samples();
    let plan = WindowPlan::new(n, recording.sample_rate, window_seconds, overlap_fraction)?;
    (0..plan.count)
        .map(|w| {
            let start = w * plan.hop;
            let mut data = Vec::with_capacity(CHANNELS * plan.length);
            for ch in 0..CHANNELS {
                data.extend_from_slice(&recording.channels.row_slice(ch)[start..start + plan.length]);
            }
            Array::matrix(CHANNELS, plan.length, data)
        })
        .collect()
}

/// Log-magnitude band extractor for fixed-length segments.
pub struct BandExtractor {
    length: usize,
    bands: usize,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex<f64>>,
}

impl BandExtractor {
    /// Extractor for `length`-sample segments keeping bins `1..=bands`.
    pub fn new(length: usize, bands: usize) -> Result<Self> {
        if bands == 0 || bands > length / 2 {
            return Err(Error::invalid(format!("{bands} bands do not fit a {length}-point DFT")));
        }
        let fft = FftPlanner::new().plan_fft_forward(length);
        Ok(BandExtractor {
            length,
            bands,
            fft,
            buffer: vec![Complex::default(); length],
        })
    }

    /// `log10(|X_b| + ε)` for `b = 1..=bands`.
    pub fn extract(&mut self, segment: &[f64], out: &mut [f64]) -> Result<()> {
        if segment.len() != self.length {
            return Err(Error::shape(
                "fft_bands segment",
                format!("expected {} samples, got {}", self.length, segment.len()),
            ));
        }
        for (b, &x) in self.buffer.iter_mut().zip(segment) {
            *b = Complex::new(x, 0.0);
        }
        self.fft.process(&mut self.buffer);
        for (o, bin) in out.iter_mut().zip(&self.buffer[1..=self.bands]) {
            *o = (bin.norm() + LOG_FLOOR).log10();
        }
        Ok(())
    }
}

/// Band features of one 1-second segment: DFT bins `1..=f_max` (1 Hz
/// spacing, DC excluded), `log10(|bin| + 1e-8)`, rectangular window.
pub fn fft_bands(segment: &[f64], sample_rate: f64, f_max: usize) -> Result<Vec<f64>> {
    let length = (sample_rate * WINDOW_SECONDS).round() as usize;
    if segment.len() != length {
        return Err(Error::shape(
            "fft_bands segment",
            format!("expected {length} samples at {sample_rate} Hz, got {}", segment.len()),
        ));
    }
    let mut out = vec![0.0; f_max];
    BandExtractor::new(length, f_max)?.extract(segment, &mut out)?;
    Ok(out)
}

/// Windows a recording and extracts band features per channel; every
/// sample inherits the recording's label and provenance.
pub fn preprocess(recording: &RawRecording) -> Result<Vec<Sample>> {
    let windows = window_signal(recording, WINDOW_SECONDS, OVERLAP_FRACTION)?;
    let length = windows.first().map_or(0, Array::cols);
    let mut extractor = BandExtractor::new(length, BANDS)?;
    windows
        .iter()
        .enumerate()
        .map(|(w, window)| {
            let mut features = vec![0.0; CHANNELS * BANDS];
            for (ch, out) in features.chunks_exact_mut(BANDS).enumerate() {
                extractor.extract(window.row_slice(ch), out)?;
            }
            Ok(Sample {
                features: Array::new(vec![CHANNELS, BANDS], features)?,
                label: recording.label,
                provenance: Provenance {
                    recording_id: recording.id.clone(),
                    patient_id: recording.patient_id.clone(),
                    seizure_id: recording.seizure_id.clone(),
                    window_index: w,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn recording(n: usize, f: impl Fn(usize, usize) -> f64) -> RawRecording {
        let data = (0..CHANNELS).flat_map(|ch| (0..n).map(move |t| (ch, t))).map(|(ch, t)| f(ch, t)).collect();
        RawRecording {
            id: "rec".into(),
            channels: Array::matrix(CHANNELS, n, data).unwrap(),
            sample_rate: 250.0,
            label: 3,
            patient_id: "p1".into(),
            seizure_id: "s1".into(),
        }
    }

    /// Direct O(N²) DFT magnitude, independent of the FFT path.
    fn dft_magnitude(x: &[f64], bin: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in x.iter().enumerate() {
            let angle = -2.0 * PI * bin as f64 * t as f64 / n;
            re += v * angle.cos();
            im += v * angle.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn window_counts() {
        assert_eq!(WindowPlan::new(2500, 250.0, 1.0, 0.75).unwrap(), WindowPlan { length: 250, hop: 62, count: 37 });
        assert_eq!(WindowPlan::new(250, 250.0, 1.0, 0.75).unwrap().count, 1);
        assert!(WindowPlan::new(249, 250.0, 1.0, 0.75).is_err());
        assert!(window_signal(&recording(249, |_, _| 0.0), 1.0, 0.75).is_err());
    }

    #[test]
    fn consecutive_windows_overlap_by_length_minus_hop() {
        let rec = recording(700, |ch, t| (ch * 1000 + t) as f64);
        let windows = window_signal(&rec, 1.0, 0.75).unwrap();
        assert_eq!(windows.len(), (700 - 250) / 62 + 1);
        for pair in windows.windows(2) {
            for ch in 0..CHANNELS {
                assert_eq!(&pair[0].row_slice(ch)[62..], &pair[1].row_slice(ch)[..250 - 62]);
            }
        }
    }

    #[test]
    fn zero_signal_hits_the_log_floor() {
        let bands = fft_bands(&[0.0; 250], 250.0, 24).unwrap();
        assert!(bands.iter().all(|&b| (b + 8.0).abs() < 1e-12));
    }

    #[test]
    fn unit_sinusoid_lands_in_its_band() {
        let x: Vec<f64> = (0..250).map(|t| (2.0 * PI * 10.0 * t as f64 / 250.0).sin()).collect();
        let bands = fft_bands(&x, 250.0, 24).unwrap();
        assert!((bands[9] - 125f64.log10()).abs() < 1e-9);
        assert!((bands[9] - 2.0969).abs() < 1e-3);
        for (b, &v) in bands.iter().enumerate() {
            if b != 9 {
                assert!(v <= -7.9, "band {} = {v}", b + 1);
            }
        }
    }

    #[test]
    fn fft_path_matches_direct_dft() {
        let x: Vec<f64> = (0..250).map(|t| ((t * 37 % 101) as f64 / 50.0 - 1.0) * 0.7).collect();
        let bands = fft_bands(&x, 250.0, 24).unwrap();
        for (b, &v) in bands.iter().enumerate() {
            let direct = (dft_magnitude(&x, b + 1) + LOG_FLOOR).log10();
            assert!((v - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn retained_bin_energy_respects_parseval() {
        let x: Vec<f64> = (0..250).map(|t| (t as f64 * 0.37).sin() * 2.0 + (t as f64 * 1.9).cos()).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let retained: f64 = (1..=24).map(|b| dft_magnitude(&x, b).powi(2)).sum();
        let bands = fft_bands(&x, 250.0, 24).unwrap();
        let from_bands: f64 = bands.iter().map(|v| (10f64.powf(*v) - LOG_FLOOR).powi(2)).sum();
        assert!(retained <= 125.0 * energy);
        assert!(from_bands <= 125.0 * energy * (1.0 + 1e-9));
    }

    #[test]
    fn log_is_not_additive() {
        let a: Vec<f64> = (0..250).map(|t| (2.0 * PI * 5.0 * t as f64 / 250.0).sin()).collect();
        let sum: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let fa = fft_bands(&a, 250.0, 24).unwrap();
        let fs = fft_bands(&sum, 250.0, 24).unwrap();
        assert!((fs[4] - 2.0 * fa[4]).abs() > 1.0);
    }

    #[test]
    fn wrong_segment_length_is_rejected() {
        assert!(fft_bands(&[0.0; 249], 250.0, 24).is_err());
    }

    #[test]
    fn preprocess_ten_seconds() {
        let rec = recording(2500, |ch, t| ((ch + 1) as f64 * t as f64 * 0.01).sin());
        let samples = preprocess(&rec).unwrap();
        assert_eq!(samples.len(), 37);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.features.shape(), [CHANNELS, BANDS]);
            assert_eq!(s.label, 3);
            assert_eq!(s.provenance.patient_id, "p1");
            assert_eq!(s.provenance.seizure_id, "s1");
            assert_eq!(s.provenance.window_index, i);
        }
        assert_eq!(samples, preprocess(&rec).unwrap());
    }
}
