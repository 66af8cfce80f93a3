//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate: 1e-3,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Adam eps and learning rate must be positive, got {} and {}",
                self.eps, self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: NetParams,
    pub second_moment: NetParams,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &NetParams, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
        })
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut NetParams, grads: &NetParams, state: &mut AdamState) -> Result<()> {
    params.check_same_shape(grads, "Adam gradients")?;
    params.check_same_shape(&state.first_moment, "Adam first moment")?;
    params.check_same_shape(&state.second_moment, "Adam second moment")?;

    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        learning_rate,
    } = state.config;
    let t = state.step_count as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);

    let moments = state.first_moment.params_mut().zip(state.second_moment.params_mut());
    for ((p, g), (m, v)) in params.params_mut().zip(grads.params()).zip(moments) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
