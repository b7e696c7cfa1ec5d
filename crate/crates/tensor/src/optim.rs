use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of a single parameter.
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(TensorError::ParamShape {
            name: name.to_string(),
            expected: param.shape().to_vec(),
            found: grad.shape().to_vec(),
        });
    }
    if !grad.is_finite() {
        return Err(TensorError::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m as f64 / bc1;
        let v_hat = *v as f64 / bc2;
        *p -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
    }
    Ok(())
}

/// Adam over a whole [`Params`] store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        let states = params.iter().map(|(_, t)| AdamState::new(t.shape())).collect();
        Self { cfg, states }
    }

    /// Applies `grads`; parameters without a gradient are left untouched.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        for (id, g) in grads.iter() {
            let name = params.name(id).to_string();
            adam_step(&name, params.get_mut(id), g, &mut self.states[id.index()], &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_fresh_state_leaves_param() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[3]);
        adam_step("p", &mut p, &Tensor::zeros(&[3]), &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(&[1]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step("p", &mut p, &Tensor::scalar(1.0), &mut s, &cfg).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        assert!((1.0 - p.item() - 0.1).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(&[1]);
        let err = adam_step("conv1.weight", &mut p, &Tensor::scalar(f32::NAN), &mut s, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
        assert_eq!(p.item(), 1.0);
    }
}
