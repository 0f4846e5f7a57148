use serde::{Deserialize, Serialize};

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. A parameter whose gradient is identically zero received no
    /// signal this step: its value and moments are left untouched.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam: {} moment slots, {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.value.same_shape(g, &format!("gradient of `{}`", p.name))?;
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{}` has {} at flat index {i}",
                    p.name,
                    g.data()[i]
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_param(x: f64) -> Vec<Parameter> {
        vec![Parameter::new("w", Tensor::vector(vec![x]))]
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut params = scalar_param(1.0);
        let mut state = AdamState::new(cfg, &params);
        state.step(&mut params, &[Tensor::vector(vec![-3.0])]).unwrap();
        let expected = 1.0 + 0.01 * 3.0 / (3.0 + 1e-9);
        assert!((params[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn three_steps_match_hand_unrolled_recurrence() {
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        };
        let grads = [0.4, -1.2, 0.7];
        let mut params = scalar_param(0.3);
        let mut state = AdamState::new(cfg, &params);
        for &g in &grads {
            state.step(&mut params, &[Tensor::vector(vec![g])]).unwrap();
        }

        // m1 = 0.1 g1, v1 = 0.02 g1^2, and so on, written out step by step.
        let (g1, g2, g3) = (0.4_f64, -1.2_f64, 0.7_f64);
        let mut w = 0.3_f64;
        let m1 = 0.1 * g1;
        let v1 = 0.02 * g1 * g1;
        w -= 0.05 * (m1 / 0.1) / ((v1 / 0.02).sqrt() + 1e-9);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.98 * v1 + 0.02 * g2 * g2;
        w -= 0.05 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9604)).sqrt() + 1e-9);
        let m3 = 0.9 * m2 + 0.1 * g3;
        let v3 = 0.98 * v2 + 0.02 * g3 * g3;
        w -= 0.05 * (m3 / (1.0 - 0.729)) / ((v3 / (1.0 - 0.941192)).sqrt() + 1e-9);

        assert!((params[0].value.data()[0] - w).abs() < 1e-12);
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = scalar_param(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = state
            .step(&mut params, &[Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = scalar_param(0.0);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(state.step(&mut params, &[Tensor::zeros(&[2])]).is_err());
    }

    proptest! {
        #[test]
        fn zero_gradient_is_identity(init in -5.0f64..5.0, warm in prop::collection::vec(-2.0f64..2.0, 0..5)) {
            let mut params = scalar_param(init);
            let mut state = AdamState::new(AdamConfig::default(), &params);
            for g in warm {
                state.step(&mut params, &[Tensor::vector(vec![g])]).unwrap();
            }
            let before = params.clone();
            state.step(&mut params, &[Tensor::vector(vec![0.0])]).unwrap();
            prop_assert_eq!(before, params);
        }
    }
}
