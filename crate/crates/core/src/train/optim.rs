use serde::{Deserialize, Serialize};

use crate::autodiff::NamedArrays;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a named parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of steps taken so far.
    pub t: u64,
    pub m: NamedArrays,
    pub v: NamedArrays,
}

impl Adam {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &NamedArrays) -> Self {
        let zeros: NamedArrays = params
            .iter()
            .map(|(k, a)| (k.clone(), crate::Array::zeros(a.shape())))
            .collect();
        Adam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut NamedArrays, grads: &NamedArrays) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::invalid(format!("gradient for unknown parameter `{name}`")));
            };
            if p.shape() != g.shape() {
                return Err(Error::shape(name.clone(), format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rounds both moment sets through `f32`.
    pub fn project_f32(&mut self) {
        for a in self.m.values_mut().chain(self.v.values_mut()) {
            a.project_f32();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn named(pairs: &[(&str, Vec<f64>)]) -> NamedArrays {
        pairs.iter().map(|(k, v)| (k.to_string(), Array::row(v.clone()))).collect()
    }

    #[test]
    fn first_step_is_normalized_sign() {
        let mut params = named(&[("w", vec![0.0, 0.0, 0.0])]);
        let grads = named(&[("w", vec![0.5, -2.0, 1e-3])]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &grads).unwrap();
        for (p, g) in params["w"].data().iter().zip(grads["w"].data()) {
            let exact = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p - exact).abs() < 1e-15, "{p} vs {exact}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let start = named(&[("w", vec![0.3, -0.7])]);
        let mut params = start.clone();
        let grads = named(&[("w", vec![0.0, 0.0])]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..100 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, start);
    }

    #[test]
    fn equal_gradients_give_equal_updates() {
        let mut params = named(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let grads = named(&[("a", vec![0.4]), ("b", vec![0.4])]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["a"], params["b"]);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let start = named(&[("w", vec![0.123456789, -3.5, 1e-300])]);
        let mut params = start.clone();
        let config = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(config, &params);
        adam.step(&mut params, &named(&[("w", vec![5.0, -1.0, 2.0])])).unwrap();
        assert!(params["w"].data().iter().zip(start["w"].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unknown_gradient_is_an_error() {
        let mut params = named(&[("w", vec![0.0])]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &named(&[("x", vec![1.0])])).is_err());
    }

    /// Scalar re-derivation of the update rule, one parameter at a time.
    fn scripted_adam(p0: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powf(t));
            let vh = v / (1.0 - cfg.beta2.powf(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        p
    }

    #[test]
    fn matches_scripted_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let cfg = AdamConfig {
                lr: rng.random_range(1e-4..1e-1),
                beta1: rng.random_range(0.5..0.99),
                beta2: rng.random_range(0.9..0.9999),
                eps: 1e-8,
            };
            let n = 6;
            let steps = rng.random_range(1..40);
            let p0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let gs: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let mut params = named(&[("w", p0.clone())]);
            let mut adam = Adam::new(cfg, &params);
            for g in &gs {
                adam.step(&mut params, &named(&[("w", g.clone())])).unwrap();
            }
            for j in 0..n {
                let series: Vec<f64> = gs.iter().map(|g| g[j]).collect();
                let expected = scripted_adam(p0[j], &series, cfg);
                assert!((params["w"].data()[j] - expected).abs() <= 1e-12);
            }
        }
    }
}
