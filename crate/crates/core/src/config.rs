//! Run configuration: training hyperparameters, dataset paths and the
//! synthetic generator setup, read from one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    default_class_specs, hard_class_specs, proportional_counts, ClassSpec, DEFAULT_DURATION_SECONDS,
    DEFAULT_RECORDINGS, DEFAULT_SAMPLE_RATE, REFERENCE_SAMPLES,
};
use crate::train::TrainConfig;
use crate::CLASSES;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PLASTIC_NMN_SEED";
/// Name of the resolved-config echo written into every output directory.
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthVariant {
    /// Well separated class spectra.
    #[default]
    Default,
    /// Class centers 1 Hz apart under heavy noise.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub variant: SynthVariant,
    /// Explicit class specs; replace the variant's specs when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<ClassSpec>>,
    /// Recordings per class; defaults to reference-proportional counts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    /// Total recordings when `counts` is absent.
    pub recordings: usize,
    pub duration_seconds: f64,
    pub sample_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            variant: SynthVariant::Default,
            specs: None,
            counts: None,
            recordings: DEFAULT_RECORDINGS,
            duration_seconds: DEFAULT_DURATION_SECONDS,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SynthConfig {
    pub fn class_specs(&self) -> Vec<ClassSpec> {
        self.specs.clone().unwrap_or_else(|| match self.variant {
            SynthVariant::Default => default_class_specs(),
            SynthVariant::Hard => hard_class_specs(),
        })
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        if let Some(c) = &self.counts {
            return Ok(c.clone());
        }
        let classes = self.class_specs().len();
        if classes != CLASSES {
            return Err(Error::invalid(format!(
                "synth: {classes} class specs need explicit counts (defaults cover {CLASSES} classes)"
            )));
        }
        proportional_counts(&REFERENCE_SAMPLES, self.recordings)
    }

    /// Copy with specs and counts spelled out.
    pub fn resolved(&self) -> Result<Self> {
        Ok(SynthConfig {
            specs: Some(self.class_specs()),
            counts: Some(self.class_counts()?),
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.class_specs();
        if specs.is_empty() || specs.len() > CLASSES {
            return Err(Error::invalid(format!("synth: need 1..={CLASSES} class specs, got {}", specs.len())));
        }
        for s in &specs {
            s.validate()?;
        }
        let counts = self.class_counts()?;
        if counts.len() != specs.len() || counts.contains(&0) {
            return Err(Error::invalid("synth: counts must give every class at least one recording"));
        }
        if !(self.duration_seconds > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::invalid("synth: duration_seconds and sample_rate must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Dataset directory (command-line flags take precedence).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory (command-line flags take precedence).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::format(what, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Defaults, or the file at `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()
    }

    /// Replaces the seed with `value` (the environment override) when set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    /// Applies [`SEED_ENV`] from the process environment.
    pub fn apply_env(&mut self) -> Result<()> {
        let value = std::env::var(SEED_ENV).ok();
        self.apply_seed_override(value.as_deref())
    }

    /// Copy with every defaulted field made explicit, for replay.
    pub fn resolved(&self) -> Result<Self> {
        Ok(RunConfig {
            train: self.train.resolved(),
            synth: self.synth.resolved()?,
            ..self.clone()
        })
    }

    /// Writes the resolved config as `config.json` into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::preprocess::dataset::write_json(&dir.join(CONFIG_ECHO), &self.resolved()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::default_counts;
    use crate::train::ModelKind;

    #[test]
    fn empty_document_gives_the_defaults() {
        let c = RunConfig::parse("{}", "test").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.train.k, c.train.l, c.train.eta), (80, 25, 0.5));
        assert_eq!(c.synth.class_counts().unwrap(), default_counts());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"epochs": 3}"#,
            r#"{"train": {"learning_rate": 0.1}}"#,
            r#"{"synth": {"noise": 2}}"#,
        ] {
            assert!(matches!(RunConfig::parse(doc, "t"), Err(Error::Format { .. })), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse(r#"{"train": {"folds": 1}}"#, "t").is_err());
        assert!(RunConfig::parse(r#"{"synth": {"counts": [1, 0, 1, 1, 1, 1, 1]}}"#, "t").is_err());
        assert!(RunConfig::parse(r#"{"synth": {"counts": [1, 1]}}"#, "t").is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let c = RunConfig::parse(r#"{"train": {"model": "lstm-baseline"}, "synth": {"variant": "hard"}}"#, "t").unwrap();
        let r = c.resolved().unwrap();
        assert_eq!(r.train.epochs, Some(150));
        assert_eq!(r.synth.specs.as_ref().unwrap(), &hard_class_specs());
        let dir = tempfile::tempdir().unwrap();
        c.write_echo(dir.path()).unwrap();
        let back = RunConfig::load(&dir.path().join(CONFIG_ECHO)).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved().unwrap(), r);
        assert_eq!(back.train.model, ModelKind::LstmBaseline);
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.train.seed, 0);
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.train.seed, 42);
        assert!(c.apply_seed_override(Some("-1")).is_err());
    }
}
