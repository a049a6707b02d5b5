use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamSet};

/// AdamW hyper-parameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// One AdamW update of `params` in place.
pub fn adamw_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, hp: &AdamWConfig) {
    assert_eq!(params.len(), grads.len(), "adamw_step: gradient length");
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (hp.beta1 as f64).powi(t);
    let bc2 = 1.0 - (hp.beta2 as f64).powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] as f64 / bc1;
        let v_hat = state.v[i] as f64 / bc2;
        let p = params[i] as f64;
        let update = m_hat / (v_hat.sqrt() + hp.eps as f64) + hp.weight_decay as f64 * p;
        params[i] = (p - hp.lr as f64 * update) as f32;
    }
}

/// AdamW over every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    /// `grads[i]` is the gradient of tensor `i` of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>]) -> Result<(), AutodiffError> {
        if grads.len() != params.len() {
            return Err(AutodiffError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.states.resize_with(params.len(), AdamState::default);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            if p.len() != g.len() {
                return Err(AutodiffError::Shape(format!(
                    "gradient {i} has {} values, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
            adamw_step(p, g, &mut self.states[i], &self.config);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![0.5f32, -1.25, 3.0];
        let before = p.clone();
        let mut s = AdamState::default();
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &mut s, &AdamWConfig::default());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let hp = AdamWConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = vec![1.0f32, 1.0];
        let mut s = AdamState::default();
        adamw_step(&mut p, &[3.0, -0.2], &mut s, &hp);
        // After bias correction m̂/√v̂ = sign(g) up to eps.
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut p = vec![1.0f32];
        let mut s = AdamState::default();
        adamw_step(&mut p, &[2.0], &mut s, &AdamWConfig::default());
        assert!(p[0] < 1.0);
    }

    #[test]
    fn decay_only_shrinks_parameters() {
        let hp = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![2.0f32];
        let mut s = AdamState::default();
        adamw_step(&mut p, &[0.0], &mut s, &hp);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let target = [0.3f32, -0.7, 1.1];
        let hp = AdamWConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::default();
        for _ in 0..200 {
            let g: Vec<f32> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            adamw_step(&mut p, &g, &mut s, &hp);
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-4, "{x} vs {t}");
        }
    }
}
