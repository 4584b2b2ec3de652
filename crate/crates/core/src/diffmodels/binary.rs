//! Bias-free binary logistic model: `p(y=1|x) = sigmoid(w . x)` with one
//! parameter per input dimension. Small enough for exact grid quadrature of
//! its posterior, which is what makes it the work-horse of the oracle
//! checks.

use super::{Example, Model};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryLogistic {
    pub input_dim: usize,
}

impl BinaryLogistic {
    pub fn new(input_dim: usize) -> Self {
        BinaryLogistic { input_dim }
    }

    fn check(&self, params: &[f64], z: &Example) -> Result<f64> {
        if z.input.len() != self.input_dim {
            return Err(CoreError::DimensionMismatch {
                axis: "input".into(),
                expected: self.input_dim,
                got: z.input.len(),
            });
        }
        if params.len() != self.input_dim {
            return Err(CoreError::DimensionMismatch {
                axis: "params".into(),
                expected: self.input_dim,
                got: params.len(),
            });
        }
        if z.label >= 2 {
            return Err(CoreError::DimensionMismatch {
                axis: "label".into(),
                expected: 2,
                got: z.label,
            });
        }
        Ok(params.iter().zip(&z.input).map(|(w, x)| w * x).sum())
    }
}

/// `log(1 + exp(v))` without overflow.
fn log1p_exp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl Model for BinaryLogistic {
    fn param_count(&self) -> usize {
        self.input_dim
    }

    fn log_likelihood(&self, params: &[f64], z: &Example) -> Result<f64> {
        let logit = self.check(params, z)?;
        // log sigmoid(logit) for y=1, log sigmoid(-logit) for y=0.
        let signed = if z.label == 1 { logit } else { -logit };
        Ok(-log1p_exp(-signed))
    }

    fn grad_log_likelihood(&self, params: &[f64], z: &Example) -> Result<Vec<f64>> {
        let logit = self.check(params, z)?;
        let p1 = 1.0 / (1.0 + (-logit).exp());
        let resid = if z.label == 1 { 1.0 - p1 } else { -p1 };
        Ok(z.input.iter().map(|x| x * resid).collect())
    }

    fn predict(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim {
            return Err(CoreError::DimensionMismatch {
                axis: "input".into(),
                expected: self.input_dim,
                got: input.len(),
            });
        }
        let logit: f64 = params.iter().zip(input).map(|(w, x)| w * x).sum();
        let p1 = 1.0 / (1.0 + (-logit).exp());
        Ok(vec![1.0 - p1, p1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_the_sigmoid_closed_form() {
        let model = BinaryLogistic::new(1);
        let z = Example::new(vec![2.0], 1, 0);
        let ll = model.log_likelihood(&[1.0], &z).unwrap();
        assert_relative_eq!(ll, -(1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = BinaryLogistic::new(2);
        let params = [0.7, -0.3];
        for &(x0, x1, y) in &[(0.5, 1.2, 1usize), (-0.4, 0.9, 0)] {
            let z = Example::new(vec![x0, x1], y, 0);
            let g = model.grad_log_likelihood(&params, &z).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                let mut plus = params;
                plus[i] += h;
                let mut minus = params;
                minus[i] -= h;
                let fd = (model.log_likelihood(&plus, &z).unwrap()
                    - model.log_likelihood(&minus, &z).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(g[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let model = BinaryLogistic::new(1);
        for &(theta, y) in &[(800.0, 0usize), (-800.0, 1), (800.0, 1), (-800.0, 0)] {
            let z = Example::new(vec![1.0], y, 0);
            let ll = model.log_likelihood(&[theta], &z).unwrap();
            assert!(ll.is_finite());
            assert!(ll <= 0.0);
        }
    }
}
