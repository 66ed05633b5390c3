use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coupled L2 term: `grad += weight_decay * param` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 5e-5 }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.len() {
        return Err(LabError::Dimension {
            op: "adam_step",
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let values = param.data_mut();
    for (i, (p, &g)) in values.iter_mut().zip(grad.data()).enumerate() {
        let g = g + cfg.weight_decay * *p;
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Adam over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self { config, states: params.iter().map(|p| AdamState::new(p.len())).collect() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(LabError::Contract(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s, &self.config)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![1.0, 1.0]);
        let mut s = AdamState::new(2);
        adam_step(&mut p, &g, &mut s, &no_decay()).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let step = 0.01 / (1.0 + 1e-8);
        assert!((p.data()[0] - (1.0 - step)).abs() < 1e-15);
        assert!((p.data()[1] - (-2.0 - step)).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::vector(vec![0.7, -0.3]);
        let g = Tensor::zeros(&[2]);
        let mut s = AdamState::new(2);
        adam_step(&mut p, &g, &mut s, &no_decay()).unwrap();
        assert_eq!(p.data(), &[0.7, -0.3]);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let cfg = AdamConfig { learning_rate: 0.05, weight_decay: 0.0, ..AdamConfig::default() };
        let g = 0.3;
        let mut p = Tensor::scalar(2.0);
        let mut s = AdamState::new(1);
        let grad = Tensor::scalar(g);
        adam_step(&mut p, &grad, &mut s, &cfg).unwrap();
        adam_step(&mut p, &grad, &mut s, &cfg).unwrap();

        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let x1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.item() - x2).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let cfg = AdamConfig { weight_decay: 0.5, ..AdamConfig::default() };
        let mut p = Tensor::scalar(2.0);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &Tensor::scalar(0.0), &mut s, &cfg).unwrap();
        // effective gradient 1.0 > 0, so the parameter shrinks by ~lr
        assert!((p.item() - (2.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut s = AdamState::new(3);
        let err = adam_step(&mut p, &Tensor::zeros(&[2]), &mut s, &AdamConfig::default());
        assert!(matches!(err, Err(LabError::Dimension { .. })));
    }
}
