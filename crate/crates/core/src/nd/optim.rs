//! SGD with momentum.
//!
//! Velocity is keyed by parameter name so the parameter set may grow between
//! steps (new task heads). A parameter absent from the gradient map is left
//! untouched; an explicit zero gradient decays its velocity as usual.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Default for SgdState {
    fn default() -> Self {
        SgdState::new(DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM).expect("defaults are valid")
    }
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(SgdState { learning_rate, momentum, velocity: BTreeMap::new() })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// v <- momentum * v - lr * g;  p <- p + v
    ///
    /// Only parameters present in `grads` are updated. A non-finite gradient
    /// aborts with a diagnostic instead of being clamped.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, param) in params {
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param {name}: grad {:?} vs param {:?}", grad.shape(), param.shape()),
                ));
            }
            grad.check_finite(&format!("sgd_step({name})"))?;
            let vel = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            for ((v, p), g) in vel.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
                *v = self.momentum * *v - self.learning_rate * g;
                *p += *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_one(state: &mut SgdState, p: &mut Tensor, g: f64) {
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(g));
        state.step([("p", &mut *p)], &grads).unwrap();
    }

    #[test]
    fn test_plain_gradient_step() {
        // momentum 0, lr 0.1, p 1, g 2 -> p 0.8
        let mut state = SgdState::new(0.1, 0.0).unwrap();
        let mut p = Tensor::scalar(1.0);
        step_one(&mut state, &mut p, 2.0);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn test_momentum_two_step_recursion() {
        // momentum 0.9, lr 0.1, g 1, p0 0: p1 = -0.1, p2 = -0.29
        let mut state = SgdState::new(0.1, 0.9).unwrap();
        let mut p = Tensor::scalar(0.0);
        step_one(&mut state, &mut p, 1.0);
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        step_one(&mut state, &mut p, 1.0);
        assert!((p.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn test_zero_gradient_decays_velocity_only() {
        let mut state = SgdState::new(0.1, 0.9).unwrap();
        let mut p = Tensor::scalar(0.0);
        step_one(&mut state, &mut p, 1.0);
        let v1 = state.velocity("p").unwrap().data()[0];
        let p1 = p.data()[0];
        step_one(&mut state, &mut p, 0.0);
        let v2 = state.velocity("p").unwrap().data()[0];
        assert!((v2 - 0.9 * v1).abs() < 1e-15);
        assert!((p.data()[0] - (p1 + v2)).abs() < 1e-15);
    }

    #[test]
    fn test_absent_gradient_leaves_param_untouched() {
        let mut state = SgdState::new(0.1, 0.9).unwrap();
        let mut p = Tensor::scalar(5.0);
        step_one(&mut state, &mut p, 1.0); // build velocity
        let before = p.clone();
        let grads = BTreeMap::new();
        state.step([("p", &mut p)], &grads).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn test_non_finite_gradient_aborts() {
        let mut state = SgdState::default();
        let mut p = Tensor::scalar(0.0);
        // Build a NaN gradient bypassing the constructor check.
        let mut bad = Tensor::scalar(0.0);
        bad.data_mut()[0] = f64::NAN;
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), bad);
        let err = state.step([("p", &mut p)], &grads).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn test_config_validation() {
        assert!(SgdState::new(0.0, 0.5).is_err());
        assert!(SgdState::new(0.1, 1.0).is_err());
        assert!(SgdState::new(0.1, -0.1).is_err());
    }
}
