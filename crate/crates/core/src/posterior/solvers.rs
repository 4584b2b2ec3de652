//! Solvers for damped Fisher systems `(F + damping I) v = rhs`.
//!
//! Three routes: an entrywise division against the stored diagonal, a
//! matrix-free conjugate-gradient solve with an explicit residual contract,
//! and a truncated-Neumann stochastic approximation that touches one sampled
//! example per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fisher_vector_product, instrument, PosteriorApprox};
use crate::diffmodels::{Dataset, Model, ParameterVector};
use crate::error::{CoreError, Result};

/// Which route a Fisher solve takes. The matrix-free routes carry the model
/// and data that realise the Fisher operator.
pub enum FisherSolver<'a> {
    Diag,
    Cg {
        model: &'a dyn Model,
        data: &'a Dataset,
        tol: f64,
        max_iter: usize,
    },
    Sa {
        model: &'a dyn Model,
        data: &'a Dataset,
        depth: usize,
        scale: f64,
        num_repeats: usize,
        seed: u64,
    },
}

impl<'a> FisherSolver<'a> {
    pub fn solve(&self, posterior: &PosteriorApprox, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            FisherSolver::Diag => solve_fisher_diag(posterior, rhs),
            FisherSolver::Cg {
                model,
                data,
                tol,
                max_iter,
            } => solve_fisher_cg(posterior, *model, data, rhs, *tol, *max_iter),
            FisherSolver::Sa {
                model,
                data,
                depth,
                scale,
                num_repeats,
                seed,
            } => solve_fisher_sa(posterior, *model, data, rhs, *depth, *scale, *num_repeats, *seed),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FisherSolver::Diag => "diag",
            FisherSolver::Cg { .. } => "cg",
            FisherSolver::Sa { .. } => "sa",
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Entrywise division by the damped Fisher diagonal.
pub fn solve_fisher_diag(posterior: &PosteriorApprox, rhs: &[f64]) -> Result<Vec<f64>> {
    instrument::note_fisher_solve();
    if rhs.len() != posterior.dim() {
        return Err(CoreError::DimensionMismatch {
            axis: "rhs".into(),
            expected: posterior.dim(),
            got: rhs.len(),
        });
    }
    let mut out = Vec::with_capacity(rhs.len());
    for (i, (&r, &f)) in rhs.iter().zip(&posterior.fisher_diag).enumerate() {
        let denom = f + posterior.damping;
        if denom == 0.0 {
            return Err(CoreError::ZeroFisherEntry { index: i });
        }
        out.push(r / denom);
    }
    Ok(out)
}

/// Conjugate gradients on the damped Fisher system with matrix-free products.
/// On success the recomputed residual satisfies
/// `||(F + damping I) v - rhs|| <= tol * ||rhs||`.
pub fn solve_fisher_cg(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    data: &Dataset,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    instrument::note_fisher_solve();
    let rhs_norm = norm(rhs);
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; rhs.len()]);
    }
    let params = &posterior.theta_hat.values;
    let damping = posterior.damping;

    let mut x = vec![0.0; rhs.len()];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rs_old: f64 = r.iter().map(|v| v * v).sum();

    for _ in 0..max_iter {
        let ap = fisher_vector_product(model, params, data, &p, damping)?;
        let p_ap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if p_ap <= 0.0 {
            // Damped operator is PSD; zero curvature means p is in the null
            // space of a zero-damping system.
            return Err(CoreError::SolverStalled {
                method: "cg".into(),
                residual: rs_old.sqrt() / rhs_norm,
                tol,
                iterations: max_iter,
            });
        }
        let alpha = rs_old / p_ap;
        for ((xi, pi), (ri, api)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new.sqrt() / rhs_norm <= tol {
            // Confirm against a freshly computed residual before returning.
            let ax = fisher_vector_product(model, params, data, &x, damping)?;
            let true_res: f64 = ax
                .iter()
                .zip(rhs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if true_res / rhs_norm <= tol {
                return Ok(x);
            }
            // Recursion drifted from the true residual; restart from x.
            r = rhs
                .iter()
                .zip(&ax)
                .map(|(b, a)| b - a)
                .collect();
            p = r.clone();
            rs_old = r.iter().map(|v| v * v).sum();
            continue;
        }
        let beta = rs_new / rs_old;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs_old = rs_new;
    }
    Err(CoreError::SolverStalled {
        method: "cg".into(),
        residual: rs_old.sqrt() / rhs_norm,
        tol,
        iterations: max_iter,
    })
}

/// Truncated Neumann series for the damped inverse, estimated with one
/// sampled example per step and averaged over seeded repeats:
/// `v = scale * sum_{j<=depth} (I - scale (F + damping I))^j rhs`.
#[allow(clippy::too_many_arguments)]
pub fn solve_fisher_sa(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    data: &Dataset,
    rhs: &[f64],
    depth: usize,
    scale: f64,
    num_repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    instrument::note_fisher_solve();
    if num_repeats == 0 {
        return Err(CoreError::invalid_config("num_repeats must be positive"));
    }
    if data.is_empty() {
        return Err(CoreError::EmptyData {
            context: "solve_fisher_sa".into(),
        });
    }
    let params = &posterior.theta_hat.values;
    let damping = posterior.damping;
    let rhs_norm = norm(rhs);
    let bound = 1e6 * rhs_norm;

    let mut mean = vec![0.0; rhs.len()];
    for repeat in 0..num_repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(repeat as u64));
        let mut u = rhs.to_vec();
        for _ in 0..depth {
            let z = &data.examples()[rng.gen_range(0..data.len())];
            let g = model.grad_log_likelihood(params, z)?;
            let dot: f64 = g.iter().zip(&u).map(|(gi, ui)| gi * ui).sum();
            // u <- rhs + (I - scale (g g^T + damping I)) u
            for ((ui, &ri), &gi) in u.iter_mut().zip(rhs).zip(&g) {
                *ui = ri + *ui - scale * (gi * dot + damping * *ui);
            }
            if norm(&u) > bound {
                return Err(CoreError::SolverDiverged {
                    method: "sa".into(),
                    norm: norm(&u),
                });
            }
        }
        for (m, ui) in mean.iter_mut().zip(&u) {
            *m += scale * ui / num_repeats as f64;
        }
    }
    Ok(mean)
}

/// One preconditioned ascent step from the posterior mode:
/// `theta_hat + gamma * solve(F, grad)`.
pub fn natural_gradient_step(
    posterior: &PosteriorApprox,
    grad: &ParameterVector,
    gamma: f64,
    solver: &FisherSolver,
) -> Result<ParameterVector> {
    if gamma == 0.0 {
        return Ok(posterior.theta_hat.clone());
    }
    let v = solver.solve(posterior, &grad.values)?;
    let mut out = posterior.theta_hat.clone();
    for (o, vi) in out.values.iter_mut().zip(&v) {
        *o += gamma * vi;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::two_blob_dataset;
    use crate::diffmodels::{LayoutEntry, ModelSpec};
    use crate::posterior::{empirical_fisher_diag, fisher_full};
    use approx::assert_relative_eq;

    fn blob_posterior(damping: f64) -> (ModelSpec, Dataset, PosteriorApprox) {
        let data = two_blob_dataset(30, 1.5, 0.9, 3);
        let spec = ModelSpec::logistic(2, 2);
        let params = spec.init_params(4);
        let diag = empirical_fisher_diag(&spec, &params.values, &data).unwrap();
        let post = PosteriorApprox::new(params, diag, data.len(), damping).unwrap();
        (spec, data, post)
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let (spec, data, post) = blob_posterior(1e-4);
        let v = solve_fisher_cg(&post, &spec, &data, &[0.0; 6], 1e-8, 50).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cg_agrees_with_dense_solve() {
        let (spec, data, post) = blob_posterior(1e-3);
        let mut dense = fisher_full(&spec, &post.theta_hat.values, &data).unwrap();
        dense.add_diagonal(post.damping);
        let rhs = vec![0.3, -0.7, 0.2, 0.9, -0.4, 0.1];
        let direct = dense.solve(&rhs).unwrap();
        let cg = solve_fisher_cg(&post, &spec, &data, &rhs, 1e-10, 500).unwrap();
        let err = direct
            .iter()
            .zip(&cg)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / direct.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn cg_residual_contract_holds_on_return() {
        let (spec, data, post) = blob_posterior(1e-4);
        let rhs = vec![1.0, 0.5, -0.5, 0.2, 0.8, -1.0];
        let tol = 1e-6;
        let v = solve_fisher_cg(&post, &spec, &data, &rhs, tol, 1000).unwrap();
        let av =
            fisher_vector_product(&spec, &post.theta_hat.values, &data, &v, post.damping).unwrap();
        let res: f64 = av
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rhs_norm: f64 = rhs.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(res / rhs_norm <= tol);
    }

    /// Synthetic identity-Fisher operator: a model whose per-example
    /// gradients are scaled standard basis vectors.
    struct BasisModel {
        dim: usize,
    }

    impl crate::diffmodels::Model for BasisModel {
        fn param_count(&self) -> usize {
            self.dim
        }
        fn log_likelihood(&self, params: &[f64], z: &crate::diffmodels::Example) -> Result<f64> {
            Ok(params[(z.id as usize) % self.dim])
        }
        fn grad_log_likelihood(
            &self,
            _params: &[f64],
            z: &crate::diffmodels::Example,
        ) -> Result<Vec<f64>> {
            let mut g = vec![0.0; self.dim];
            // With dim examples, (1/N) sum g g^T = I when each g has norm
            // sqrt(dim) on a distinct coordinate.
            g[(z.id as usize) % self.dim] = (self.dim as f64).sqrt();
            Ok(g)
        }
        fn predict(&self, _params: &[f64], _input: &[f64]) -> Result<Vec<f64>> {
            Err(CoreError::Unsupported {
                message: "basis model".into(),
            })
        }
    }

    fn identity_fisher_setup(dim: usize, damping: f64) -> (BasisModel, Dataset, PosteriorApprox) {
        let model = BasisModel { dim };
        let examples = (0..dim)
            .map(|i| crate::diffmodels::Example::new(vec![0.0], 0, i as u64))
            .collect();
        let data = Dataset::new(examples, 1).unwrap();
        let theta = ParameterVector::new(
            vec![0.0; dim],
            vec![LayoutEntry {
                name: "w".into(),
                shape: vec![dim],
            }],
        )
        .unwrap();
        let diag = empirical_fisher_diag(&model, &theta.values, &data).unwrap();
        let post = PosteriorApprox::new(theta, diag, dim, damping).unwrap();
        (model, data, post)
    }

    #[test]
    fn identity_fisher_cg_solution_is_scaled_rhs() {
        let damping = 0.5;
        let (model, data, post) = identity_fisher_setup(4, damping);
        let rhs = vec![2.0, -1.0, 0.5, 3.0];
        let v = solve_fisher_cg(&post, &model, &data, &rhs, 1e-12, 50).unwrap();
        for (vi, ri) in v.iter().zip(&rhs) {
            assert_relative_eq!(*vi, ri / (1.0 + damping), epsilon = 1e-9);
        }
    }

    #[test]
    fn sa_depth_zero_is_scaled_rhs() {
        let (spec, data, post) = blob_posterior(1e-4);
        let rhs = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let v = solve_fisher_sa(&post, &spec, &data, &rhs, 0, 0.25, 3, 7).unwrap();
        for (vi, ri) in v.iter().zip(&rhs) {
            assert_relative_eq!(*vi, 0.25 * ri, epsilon = 1e-12);
        }
    }

    #[test]
    fn sa_approaches_dense_solve() {
        let (spec, data, post) = blob_posterior(0.05);
        let mut dense = fisher_full(&spec, &post.theta_hat.values, &data).unwrap();
        dense.add_diagonal(post.damping);
        let rhs = vec![0.5, -0.2, 0.4, 0.1, -0.6, 0.3];
        let direct = dense.solve(&rhs).unwrap();
        let sa = solve_fisher_sa(&post, &spec, &data, &rhs, 1000, 0.2, 10, 11).unwrap();
        let err = direct
            .iter()
            .zip(&sa)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / direct.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err < 0.10, "relative error {err}");
    }

    #[test]
    fn sa_error_shrinks_with_depth() {
        let (spec, data, post) = blob_posterior(0.05);
        let mut dense = fisher_full(&spec, &post.theta_hat.values, &data).unwrap();
        dense.add_diagonal(post.damping);
        let rhs = vec![0.5, -0.2, 0.4, 0.1, -0.6, 0.3];
        let direct = dense.solve(&rhs).unwrap();
        let mut medians = Vec::new();
        for &depth in &[0usize, 8, 64, 256, 1024] {
            let mut errs: Vec<f64> = (0..11)
                .map(|s| {
                    let sa =
                        solve_fisher_sa(&post, &spec, &data, &rhs, depth, 0.2, 10, 100 + s)
                            .unwrap();
                    direct
                        .iter()
                        .zip(&sa)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(errs[5]);
        }
        for w in medians.windows(2) {
            assert!(w[1] < w[0], "medians not shrinking: {medians:?}");
        }
    }

    #[test]
    fn sa_divergence_is_reported() {
        let (spec, data, post) = blob_posterior(0.0);
        let rhs = vec![1.0; 6];
        // A scale far above 2/||F|| makes the iteration explode.
        let res = solve_fisher_sa(&post, &spec, &data, &rhs, 10_000, 50.0, 1, 3);
        assert!(matches!(res, Err(CoreError::SolverDiverged { .. })));
    }

    #[test]
    fn natural_gradient_step_gamma_zero_is_identity() {
        let (_, _, post) = blob_posterior(1e-4);
        let grad = ParameterVector {
            values: vec![1.0; 6],
            layout: post.theta_hat.layout.clone(),
        };
        let out = natural_gradient_step(&post, &grad, 0.0, &FisherSolver::Diag).unwrap();
        assert_eq!(out.values, post.theta_hat.values);
    }

    #[test]
    fn identity_fisher_natural_gradient_is_plain_gradient() {
        let (_, _, post) = identity_fisher_setup(3, 0.0);
        let grad = ParameterVector {
            values: vec![0.5, -1.0, 2.0],
            layout: post.theta_hat.layout.clone(),
        };
        let out = natural_gradient_step(&post, &grad, 0.1, &FisherSolver::Diag).unwrap();
        for ((o, t), g) in out
            .values
            .iter()
            .zip(&post.theta_hat.values)
            .zip(&grad.values)
        {
            assert_relative_eq!(*o, t + 0.1 * g, epsilon = 1e-12);
        }
    }

    #[test]
    fn diag_solver_matches_scalar_division() {
        let theta = ParameterVector::new(
            vec![1.0],
            vec![LayoutEntry {
                name: "w".into(),
                shape: vec![1],
            }],
        )
        .unwrap();
        let post = PosteriorApprox::new(theta, vec![0.25], 10, 0.05).unwrap();
        let grad = ParameterVector {
            values: vec![0.9],
            layout: post.theta_hat.layout.clone(),
        };
        let out = natural_gradient_step(&post, &grad, 2.0, &FisherSolver::Diag).unwrap();
        assert_relative_eq!(out.values[0], 1.0 + 2.0 * 0.9 / 0.3, epsilon = 1e-12);
    }

    #[test]
    fn zero_diagonal_without_damping_errors() {
        let theta = ParameterVector::new(
            vec![0.0],
            vec![LayoutEntry {
                name: "w".into(),
                shape: vec![1],
            }],
        )
        .unwrap();
        let post = PosteriorApprox::new(theta, vec![0.0], 5, 0.0).unwrap();
        assert!(matches!(
            solve_fisher_diag(&post, &[1.0]),
            Err(CoreError::ZeroFisherEntry { index: 0 })
        ));
    }
}
