use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Memory network with Hebbian-plastic controllers.
    PlasticNmn,
    /// Memory network with LSTM controllers.
    NmnFixed,
    /// Stacked LSTM encoder straight into the dense readout.
    LstmBaseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::PlasticNmn, ModelKind::NmnFixed, ModelKind::LstmBaseline];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PlasticNmn => "plastic-nmn",
            ModelKind::NmnFixed => "nmn-fixed",
            ModelKind::LstmBaseline => "lstm-baseline",
        }
    }

    pub fn has_memory(self) -> bool {
        self != ModelKind::LstmBaseline
    }

    pub fn default_epochs(self) -> usize {
        match self {
            ModelKind::LstmBaseline => 150,
            _ => 50,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model `{s}` (expected plastic-nmn, nmn-fixed or lstm-baseline)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    /// Defaults by model kind when absent.
    pub epochs: Option<usize>,
    pub folds: usize,
    pub seed: u64,
    /// Embedding width (encoder hidden size and memory slot width).
    pub k: usize,
    /// Memory slots.
    pub l: usize,
    /// Hebbian learning rate.
    pub eta: f64,
    /// Initial memory entries are uniform in `±init_memory`.
    pub init_memory: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::PlasticNmn,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 32,
            epochs: None,
            folds: 5,
            seed: 0,
            k: 80,
            l: 25,
            eta: 0.5,
            init_memory: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn for_model(model: ModelKind) -> Self {
        TrainConfig {
            model,
            ..Self::default()
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.model.default_epochs())
    }

    /// Copy with every defaulted field made explicit.
    pub fn resolved(&self) -> Self {
        TrainConfig {
            epochs: Some(self.epochs()),
            ..self.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::invalid(format!("train config: {what}")));
        // lr = 0 is allowed: it freezes the parameters
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.batch == 0 || self.k == 0 || self.l == 0 || self.epochs == Some(0) {
            return bad("batch, epochs, k and l must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.init_memory.is_finite() && self.init_memory >= 0.0) {
            return bad(format!("init_memory must be finite and >= 0, got {}", self.init_memory));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (1e-3, 0.9, 0.999, 1e-8));
        assert_eq!((c.batch, c.folds, c.k, c.l, c.eta), (32, 5, 80, 25, 0.5));
        assert_eq!(c.epochs(), 50);
        assert_eq!(TrainConfig::for_model(ModelKind::LstmBaseline).epochs(), 150);
        assert_eq!(c.resolved().epochs, Some(50));
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c: TrainConfig = serde_json::from_str(r#"{"model":"lstm-baseline","epochs":3}"#).unwrap();
        assert_eq!(c.model, ModelKind::LstmBaseline);
        assert_eq!(c.epochs(), 3);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate":1}"#).is_err());
    }

    #[test]
    fn validation() {
        let ok = TrainConfig::default();
        for bad in [
            TrainConfig { folds: 1, ..ok.clone() },
            TrainConfig { eta: 1.5, ..ok.clone() },
            TrainConfig { lr: -1.0, ..ok.clone() },
            TrainConfig { batch: 0, ..ok.clone() },
            TrainConfig { beta2: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        TrainConfig { lr: 0.0, ..ok }.validate().unwrap();
    }

    #[test]
    fn model_names_parse() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("nmn".parse::<ModelKind>().is_err());
    }
}
