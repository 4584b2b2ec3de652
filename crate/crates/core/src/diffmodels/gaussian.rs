//! Linear model with a Gaussian likelihood.
//!
//! Used where conjugate closed forms make exactness checks possible: the
//! log-posterior is exactly quadratic, so anchor-penalty adaptation and
//! deletion have known optima. Real-valued targets are keyed by example id
//! (the `Example` label field is ignored).

use std::collections::HashMap;

use super::{Example, Model};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct GaussianLinearModel {
    input_dim: usize,
    noise_variance: f64,
    targets: HashMap<u64, f64>,
}

impl GaussianLinearModel {
    pub fn new(input_dim: usize, noise_variance: f64, targets: HashMap<u64, f64>) -> Self {
        GaussianLinearModel {
            input_dim,
            noise_variance,
            targets,
        }
    }

    fn target(&self, z: &Example) -> Result<f64> {
        self.targets.get(&z.id).copied().ok_or_else(|| {
            CoreError::invalid_config(format!("no Gaussian target registered for example {}", z.id))
        })
    }

    fn mean(&self, params: &[f64], z: &Example) -> f64 {
        params.iter().zip(&z.input).map(|(p, x)| p * x).sum()
    }
}

impl Model for GaussianLinearModel {
    fn param_count(&self) -> usize {
        self.input_dim
    }

    fn log_likelihood(&self, params: &[f64], z: &Example) -> Result<f64> {
        let y = self.target(z)?;
        let r = y - self.mean(params, z);
        Ok(-0.5 * r * r / self.noise_variance
            - 0.5 * (2.0 * std::f64::consts::PI * self.noise_variance).ln())
    }

    fn grad_log_likelihood(&self, params: &[f64], z: &Example) -> Result<Vec<f64>> {
        let y = self.target(z)?;
        let r = y - self.mean(params, z);
        Ok(z.input.iter().map(|x| x * r / self.noise_variance).collect())
    }

    fn predict(&self, _params: &[f64], _input: &[f64]) -> Result<Vec<f64>> {
        Err(CoreError::Unsupported {
            message: "Gaussian linear model has no class probabilities".into(),
        })
    }
}
