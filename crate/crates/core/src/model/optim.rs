use serde::{Deserialize, Serialize};

use super::{ParamSet, SegModel, SegModelConfig};
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::nn::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in iterations.
    pub warmup_iters: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// SGD with momentum, L2 weight decay and linear learning-rate warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Real> {
    pub config: SgdConfig,
    pub velocity: ParamSet<T>,
    pub iteration: u64,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, model: &SegModelConfig) -> Self {
        Sgd {
            config,
            velocity: ParamSet::zeros_like(model),
            iteration: 0,
        }
    }

    /// `lr * min(it + 1, W) / W`: `lr / W` at iteration 0, `lr` from iteration `W - 1` on.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        let w = self.config.warmup_iters;
        if w == 0 {
            return self.config.lr;
        }
        self.config.lr * ((iteration + 1).min(w) as f64) / w as f64
    }

    /// Applies one update from accumulated gradients and returns the scalar
    /// objective. Fails without touching parameters when any term is not finite.
    pub fn train_step(&mut self, model: &mut SegModel<T>, grads: &ParamSet<T>, losses: &LossBundle) -> Result<f64> {
        for (name, value) in losses.terms() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: name.to_string(),
                    iteration: self.iteration,
                    value,
                });
            }
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient[{bad}]"),
                iteration: self.iteration,
                value: f64::NAN,
            });
        }
        let lr = T::from_f64(self.learning_rate(self.iteration));
        let mom = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        for ((p, v), g) in model
            .params
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads.iter())
        {
            let d = *g + wd * *p;
            *v = mom * *v + d;
            *p -= lr * *v;
        }
        self.iteration += 1;
        Ok(losses.total())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SegModelConfig {
        SegModelConfig {
            image_height: 8,
            image_width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn warmup_schedule() {
        let s = Sgd::<f32>::new(SgdConfig::default(), &cfg());
        assert!((s.learning_rate(0) - 0.005 / 100.0).abs() < 1e-15);
        assert!((s.learning_rate(49) - 0.0025).abs() < 1e-15);
        assert_eq!(s.learning_rate(100), 0.005);
        assert_eq!(s.learning_rate(5000), 0.005);
    }

    #[test]
    fn zero_gradient_only_decays_weights() {
        let mut m = SegModel::<f64>::new(cfg(), 1).unwrap();
        let before = m.params.clone();
        let mut s = Sgd::new(SgdConfig::default(), &cfg());
        let grads = ParamSet::zeros_like(&cfg());
        s.train_step(&mut m, &grads, &LossBundle::supervised(0.0, 0.0)).unwrap();
        let lr = 0.005 / 100.0;
        for (a, b) in m.params.iter().zip(before.iter()) {
            assert!((a - b * (1.0 - lr * 1e-4)).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn non_finite_term_named() {
        let mut m = SegModel::<f32>::new(cfg(), 1).unwrap();
        let before = m.params.clone();
        let mut s = Sgd::new(SgdConfig::default(), &cfg());
        let grads = ParamSet::zeros_like(&cfg());
        let mut b = LossBundle::supervised(1.0, 1.0);
        b.target_s2 = f64::NAN;
        let err = s.train_step(&mut m, &grads, &b).unwrap_err();
        assert!(err.to_string().contains("target_s2"), "{err}");
        assert_eq!(m.params, before);
    }
}
