//! Posterior approximations around a trained point estimate: empirical
//! Fisher information, matrix-free Fisher-system solvers, natural-gradient
//! steps, and the anchored adaptation objective shared by cause
//! identification (learn) and data deletion (unlearn).

mod adapt;
pub mod instrument;
mod linalg;
mod solvers;

pub use adapt::{ewc_adapt, ewc_adapt_detailed, fixed_point_check, AdaptOutcome, AdaptSign, EwcConfig};
pub use linalg::DenseMatrix;
pub use solvers::{
    natural_gradient_step, solve_fisher_cg, solve_fisher_diag, solve_fisher_sa, FisherSolver,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmodels::{Dataset, Model, ParameterVector};
use crate::error::{CoreError, Result};

/// Matrices denser than this are refused by [`fisher_full`]; the diagonal
/// and matrix-free paths cover larger models.
pub const DENSE_LIMIT: usize = 200;

/// Default damping added to every Fisher solve; the empirical Fisher is
/// generically rank-deficient when the sample count is below the parameter
/// count.
pub const DEFAULT_DAMPING: f64 = 1e-4;

/// Laplace-style posterior surrogate: a point estimate, the diagonal
/// empirical Fisher at that point, the training-set size behind it, and the
/// damping used whenever the Fisher is inverted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorApprox {
    pub theta_hat: ParameterVector,
    pub fisher_diag: Vec<f64>,
    pub n_train: usize,
    pub damping: f64,
}

impl PosteriorApprox {
    pub fn new(
        theta_hat: ParameterVector,
        fisher_diag: Vec<f64>,
        n_train: usize,
        damping: f64,
    ) -> Result<Self> {
        if fisher_diag.len() != theta_hat.values.len() {
            return Err(CoreError::DimensionMismatch {
                axis: "fisher_diag".into(),
                expected: theta_hat.values.len(),
                got: fisher_diag.len(),
            });
        }
        if fisher_diag.iter().any(|&f| f < 0.0 || !f.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "fisher_diag (negative or non-finite entry)".into(),
            });
        }
        if n_train == 0 {
            return Err(CoreError::invalid_config("n_train must be positive"));
        }
        if damping < 0.0 || !damping.is_finite() {
            return Err(CoreError::invalid_config("damping must be non-negative"));
        }
        Ok(PosteriorApprox {
            theta_hat,
            fisher_diag,
            n_train,
            damping,
        })
    }

    /// Builds the approximation at `theta_hat` from the training data.
    pub fn fit(
        model: &dyn Model,
        theta_hat: ParameterVector,
        data: &Dataset,
        damping: f64,
    ) -> Result<Self> {
        let fisher_diag = empirical_fisher_diag(model, &theta_hat.values, data)?;
        PosteriorApprox::new(theta_hat, fisher_diag, data.len(), damping)
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.values.len()
    }
}

const CHUNK: usize = 64;

/// Diagonal of the empirical Fisher: `(1/N) sum_z g_z .* g_z` with gradients
/// taken at the observed labels. Chunked in fixed order, so the result is
/// thread-count independent.
pub fn empirical_fisher_diag(
    model: &dyn Model,
    params: &[f64],
    data: &Dataset,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(CoreError::EmptyData {
            context: "empirical_fisher_diag".into(),
        });
    }
    let dim = model.param_count();
    let partials: Vec<Vec<f64>> = data
        .examples()
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; dim];
            for z in chunk {
                let g = model.grad_log_likelihood(params, z)?;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi * gi;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; dim];
    for part in partials {
        for (t, p) in total.iter_mut().zip(&part) {
            *t += p;
        }
    }
    let scale = 1.0 / data.len() as f64;
    total.iter_mut().for_each(|t| *t *= scale);
    Ok(total)
}

/// Dense empirical Fisher `(1/N) sum_z g_z g_z^T`, available as an oracle
/// for models with at most [`DENSE_LIMIT`] parameters.
pub fn fisher_full(model: &dyn Model, params: &[f64], data: &Dataset) -> Result<DenseMatrix> {
    fisher_full_with_limit(model, params, data, DENSE_LIMIT)
}

pub fn fisher_full_with_limit(
    model: &dyn Model,
    params: &[f64],
    data: &Dataset,
    dense_limit: usize,
) -> Result<DenseMatrix> {
    if data.is_empty() {
        return Err(CoreError::EmptyData {
            context: "fisher_full".into(),
        });
    }
    let dim = model.param_count();
    if dim > dense_limit {
        return Err(CoreError::invalid_config(format!(
            "fisher_full needs <= {dense_limit} parameters, got {dim}; use the diagonal or a matrix-free solver"
        )));
    }
    let mut values = vec![0.0; dim * dim];
    for z in data.examples() {
        let g = model.grad_log_likelihood(params, z)?;
        for i in 0..dim {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            let row = &mut values[i * dim..(i + 1) * dim];
            for (r, &gj) in row.iter_mut().zip(&g) {
                *r += gi * gj;
            }
        }
    }
    let scale = 1.0 / data.len() as f64;
    values.iter_mut().for_each(|v| *v *= scale);
    Ok(DenseMatrix { dim, values })
}

/// Matrix-free damped Fisher-vector product:
/// `(1/N) sum_z g_z (g_z^T v) + damping * v`.
pub fn fisher_vector_product(
    model: &dyn Model,
    params: &[f64],
    data: &Dataset,
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    let dim = model.param_count();
    let partials: Vec<Vec<f64>> = data
        .examples()
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; dim];
            for z in chunk {
                let g = model.grad_log_likelihood(params, z)?;
                let dot: f64 = g.iter().zip(v).map(|(gi, vi)| gi * vi).sum();
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi * dot;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; dim];
    for part in partials {
        for (o, p) in out.iter_mut().zip(&part) {
            *o += p;
        }
    }
    let scale = 1.0 / data.len() as f64;
    for (o, vi) in out.iter_mut().zip(v) {
        *o = *o * scale + damping * vi;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::two_blob_dataset;
    use crate::diffmodels::{Example, ModelSpec};
    use approx::assert_relative_eq;

    #[test]
    fn single_example_fisher_is_squared_gradient() {
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.init_params(1);
        let data = Dataset::new(vec![Example::new(vec![0.4, -0.2], 1, 0)], 2).unwrap();
        let diag = empirical_fisher_diag(&spec, &params.values, &data).unwrap();
        let g = spec
            .grad_log_likelihood(&params.values, &data.examples()[0])
            .unwrap();
        for (d, gi) in diag.iter().zip(&g) {
            assert_relative_eq!(*d, gi * gi, epsilon = 1e-14);
        }
    }

    #[test]
    fn fisher_vanishes_at_a_stationary_point() {
        // Saturated logits: every per-example gradient underflows to zero.
        let spec = ModelSpec::logistic(1, 2);
        let mut params = spec.zero_params();
        params.values[2] = 500.0;
        params.values[3] = -500.0;
        let data = Dataset::new(
            (0..5)
                .map(|i| Example::new(vec![i as f64 / 10.0], 0, i))
                .collect(),
            2,
        )
        .unwrap();
        let diag = empirical_fisher_diag(&spec, &params.values, &data).unwrap();
        assert!(diag.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn scalar_logistic_fisher_matches_hand_formula() {
        // One effective parameter: binary softmax with class-1 weight theta,
        // class-0 weight 0, no biases used. The per-example gradient in the
        // theta coordinate is x * (1{y=1} - sigmoid(theta x)).
        let spec = ModelSpec::logistic(1, 2);
        let mut params = spec.zero_params();
        let theta = 0.8;
        params.values[1] = theta;
        let xs = [0.5, -1.0, 2.0, 0.3];
        let ys = [1usize, 0, 1, 0];
        let data = Dataset::new(
            xs.iter()
                .zip(ys)
                .enumerate()
                .map(|(i, (&x, y))| Example::new(vec![x], y, i as u64))
                .collect(),
            2,
        )
        .unwrap();
        let diag = empirical_fisher_diag(&spec, &params.values, &data).unwrap();
        let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
        let hand: f64 = xs
            .iter()
            .zip(ys)
            .map(|(&x, y)| {
                let resid = if y == 1 { 1.0 - sigmoid(theta * x) } else { -sigmoid(theta * x) };
                (x * resid) * (x * resid)
            })
            .sum::<f64>()
            / xs.len() as f64;
        assert_relative_eq!(diag[1], hand, epsilon = 1e-10);
    }

    #[test]
    fn full_fisher_diagonal_equals_diag_and_is_psd() {
        let data = two_blob_dataset(40, 2.0, 0.8, 5);
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.init_params(6);
        let full = fisher_full(&spec, &params.values, &data).unwrap();
        let diag = empirical_fisher_diag(&spec, &params.values, &data).unwrap();
        for i in 0..full.dim {
            assert_eq!(full.at(i, i), diag[i]);
            for j in 0..full.dim {
                assert_relative_eq!(full.at(i, j), full.at(j, i), epsilon = 1e-12);
            }
        }
        // PSD within -1e-9: shifted Cholesky must succeed.
        assert!(full.shifted_cholesky_ok(1e-9));
    }

    #[test]
    fn full_fisher_rank_is_bounded_by_sample_count() {
        let data = two_blob_dataset(3, 2.0, 0.8, 7);
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.init_params(8);
        let full = fisher_full(&spec, &params.values, &data).unwrap();
        assert!(full.rank(1e-10) <= 3);
    }

    #[test]
    fn dense_limit_is_enforced() {
        let spec = ModelSpec::mlp(30, vec![30], 10, crate::diffmodels::Activation::Relu);
        let params = spec.init_params(9);
        let data = two_blob_dataset(4, 1.0, 1.0, 1);
        // 30*30+30 + 30*10+10 = 1270 params > 200.
        let err = fisher_full(&spec, &params.values, &data);
        assert!(err.is_err());
    }

    #[test]
    fn hand_summed_two_parameter_fisher() {
        let spec = ModelSpec::logistic(1, 2);
        let params = spec.init_params(10);
        let data = Dataset::new(
            vec![
                Example::new(vec![0.7], 0, 0),
                Example::new(vec![-0.4], 1, 1),
            ],
            2,
        )
        .unwrap();
        let full = fisher_full(&spec, &params.values, &data).unwrap();
        let g0 = spec
            .grad_log_likelihood(&params.values, &data.examples()[0])
            .unwrap();
        let g1 = spec
            .grad_log_likelihood(&params.values, &data.examples()[1])
            .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let hand = (g0[i] * g0[j] + g1[i] * g1[j]) / 2.0;
                assert_relative_eq!(full.at(i, j), hand, epsilon = 1e-12);
            }
        }
    }
}
