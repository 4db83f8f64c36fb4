//! SGD with momentum and a warmup-then-cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::models::{Bound, ParamSet};
use crate::tensor::{Gradients, Real, Tensor};
use crate::{Error, Result};

/// Pull trainable gradients out of `grads`, keyed by parameter name.
pub fn collect_grads(bound: &Bound, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(n, v)| grads.take(v).map(|g| (n.to_string(), g)))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: Real,
    pub weight_decay: Real,
    velocity: BTreeMap<String, Vec<Real>>,
}

impl Sgd {
    pub fn new(momentum: Real, weight_decay: Real) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// `g = grad + wd*w; v = m*v + g; w -= lr*v`, for every entry of `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: Real) -> Result<()> {
        for (name, g) in grads {
            let w = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if w.shape() != g.shape() {
                return Err(Error::shape("sgd_step", format!("{name}: {:?} vs {:?}", w.shape(), g.shape())));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + d;
                *wi -= lr * *vi;
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("sgd_step"));
            }
        }
        Ok(())
    }
}

/// Linear warmup for `warmup` steps, then cosine decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: Real,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> Real {
        if step < self.warmup {
            return self.base_lr * (step + 1) as Real / self.warmup as Real;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as Real / span as Real).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI as Real * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_matches_hand_computation() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(&[1.0, -2.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(&[0.5, 0.5]));
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut p, &g, 0.1).unwrap();
        // v = [0.6, 0.3]
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.94).abs() < 1e-6 && (w[1] + 2.03).abs() < 1e-6);
        opt.step(&mut p, &g, 0.1).unwrap();
        // g' = [0.594, 0.297], v = [1.134, 0.567]
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (0.94 - 0.1134)).abs() < 1e-5);
        assert!((w[1] - (-2.03 - 0.0567)).abs() < 1e-5);
    }

    #[test]
    fn unknown_gradient_rejected() {
        let mut p = ParamSet::new();
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::vector(&[1.0]));
        assert!(Sgd::new(0.9, 0.0).step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1.0,
            warmup: 4,
            total: 14,
        };
        assert!((s.lr(0) - 0.25).abs() < 1e-6);
        assert!((s.lr(3) - 1.0).abs() < 1e-6);
        assert!((s.lr(4) - 1.0).abs() < 1e-6);
        assert!((s.lr(9) - 0.5).abs() < 1e-6);
        assert!(s.lr(14).abs() < 1e-6);
        assert!(s.lr(100).abs() < 1e-6);
    }
}
