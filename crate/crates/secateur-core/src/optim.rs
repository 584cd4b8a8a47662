//! SGD and Adam parameter updates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::params::{ParamIx, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer over a subset of a [`ParamSet`]. Adam moment buffers are
/// allocated lazily per parameter and always shape-match it.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Result<Self, CoreError> {
        if !(lr > 0.0) {
            return Err(CoreError::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self, CoreError> {
        Self::new(OptKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self, CoreError> {
        Self::new(OptKind::Adam, lr)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one optimization step over `(param, gradient)` pairs.
    ///
    /// The whole step is rejected, with no parameter mutated, if any
    /// gradient entry is non-finite or shape-mismatched.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[(ParamIx, Vec<f64>)],
    ) -> Result<(), CoreError> {
        for (ix, g) in grads {
            let p = params.get(*ix);
            if p.numel() != g.len() {
                return Err(CoreError::Shape(format!(
                    "gradient for '{}' has {} elements, parameter has {}",
                    params.name(*ix),
                    g.len(),
                    p.numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite(format!(
                    "gradient for '{}' contains NaN/Inf; step rejected",
                    params.name(*ix)
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for (ix, g) in grads {
            let data = params.get_mut(*ix).data_mut();
            match self.kind {
                OptKind::Sgd => {
                    for (p, gv) in data.iter_mut().zip(g) {
                        *p -= self.lr * gv;
                    }
                }
                OptKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(ix.0)
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
                    let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
                    for i in 0..g.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        data[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    extern crate std;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_update_is_p_minus_lr_g() {
        let mut ps = ParamSet::new();
        let ix = ps.add("p", Tensor::from_vec(vec![1.0]));
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(&mut ps, &[(ix, vec![2.0])]).unwrap();
        assert_eq!(ps.get(ix).data()[0], 0.8);
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut ps = ParamSet::new();
        let ix = ps.add("p", Tensor::from_vec(vec![3.5, -1.25]));
        let mut opt = Optimizer::adam(1e-3).unwrap();
        for _ in 0..5 {
            opt.step(&mut ps, &[(ix, vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(ps.get(ix).data(), &[3.5, -1.25]);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        // Hand-evaluated recurrence at t=1 with g=1:
        // m=0.1, v=0.001, mhat=1, vhat=1, delta = lr / (1 + eps).
        let mut ps = ParamSet::new();
        let ix = ps.add("p", Tensor::from_vec(vec![1.0]));
        let mut opt = Optimizer::adam(1e-3).unwrap();
        opt.step(&mut ps, &[(ix, vec![1.0])]).unwrap();
        let delta = 1.0 - ps.get(ix).data()[0];
        assert!((delta - 1e-3).abs() < 1e-10, "delta = {delta}");
    }

    #[test]
    fn nan_grad_rejects_whole_step() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::from_vec(vec![1.0]));
        let b = ps.add("b", Tensor::from_vec(vec![2.0]));
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let err = opt
            .step(&mut ps, &[(a, vec![1.0]), (b, vec![f64::NAN])])
            .unwrap_err();
        assert!(matches!(err, CoreError::NonFinite(_)));
        // first param untouched even though its grad was fine
        assert_eq!(ps.get(a).data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn positive_lr_required() {
        assert!(Optimizer::sgd(0.0).is_err());
        assert!(Optimizer::adam(-1.0).is_err());
    }
}
