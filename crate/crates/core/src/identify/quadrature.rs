//! Exact small-scale oracles for the log-density ratio
//! `r(C) = log p(F | D \ C) - log p(F | D)`.
//!
//! For models with at most three parameters, the Bayesian integrals are
//! computed by dense grid quadrature under a Gaussian prior. Two independent
//! numerical routes exist: the direct route integrates against the posterior
//! over `D \ C`; the predictive route rewrites the ratio as a difference of
//! log-expectations of `p(C|theta)^{-1}` under the posteriors given `D, F`
//! and `D`, so only one updated posterior is needed. Their agreement is an
//! end-to-end check of the posterior-editing algebra; their disagreement
//! with the Taylor form bounds the approximations the fast scorers make.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffmodels::{Dataset, Model};
use crate::error::{CoreError, Result};
use crate::posterior::DenseMatrix;

/// Zero-mean isotropic Gaussian prior over the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub precision: f64,
}

impl Default for GaussianPrior {
    fn default() -> Self {
        GaussianPrior { precision: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureConfig {
    pub points_per_dim: usize,
    /// Half-width of the grid in posterior standard deviations.
    pub half_width_sds: f64,
    /// Largest tolerable posterior mass on the grid boundary.
    pub max_boundary_mass: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            points_per_dim: 2001,
            half_width_sds: 10.0,
            max_boundary_mass: 1e-8,
        }
    }
}

const MAX_DIM: usize = 3;

/// A posterior grid built once per `(prior, model, train, failures)` tuple;
/// ratio queries over candidate cause sets reuse it.
pub struct QuadratureOracle<'a> {
    model: &'a dyn Model,
    train: &'a Dataset,
    config: QuadratureConfig,
    /// Grid coordinates per dimension.
    axes: Vec<Vec<f64>>,
    /// Flattened per-grid-point log prior.
    log_prior: Vec<f64>,
    /// Flattened per-grid-point `log p(D | theta)`.
    log_lik_train: Vec<f64>,
    /// Flattened per-grid-point `log p(F | theta)`.
    log_lik_failures: Vec<f64>,
    /// Whether each grid point lies on the boundary of the box.
    boundary: Vec<bool>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.map(|v| (v - m).exp()).sum();
    m + s.ln()
}

impl<'a> QuadratureOracle<'a> {
    pub fn new(
        prior: &GaussianPrior,
        model: &'a dyn Model,
        train: &'a Dataset,
        failures: &Dataset,
        config: QuadratureConfig,
    ) -> Result<Self> {
        let dim = model.param_count();
        if dim == 0 || dim > MAX_DIM {
            return Err(CoreError::invalid_config(format!(
                "grid quadrature supports 1..={MAX_DIM} parameters, got {dim}"
            )));
        }
        if config.points_per_dim < 3 {
            return Err(CoreError::invalid_config("points_per_dim must be at least 3"));
        }
        if prior.precision <= 0.0 {
            return Err(CoreError::invalid_config("prior precision must be positive"));
        }

        let map = posterior_mode(prior, model, train)?;
        let stds = laplace_stds(prior, model, train, &map)?;
        let axes: Vec<Vec<f64>> = (0..dim)
            .map(|d| {
                let half = config.half_width_sds * stds[d];
                let n = config.points_per_dim;
                (0..n)
                    .map(|i| map[d] - half + 2.0 * half * i as f64 / (n - 1) as f64)
                    .collect()
            })
            .collect();

        let grid_size = config.points_per_dim.pow(dim as u32);
        let mut log_prior = Vec::with_capacity(grid_size);
        let mut log_lik_train = Vec::with_capacity(grid_size);
        let mut log_lik_failures = Vec::with_capacity(grid_size);
        let mut boundary = Vec::with_capacity(grid_size);
        let mut theta = vec![0.0; dim];
        let mut index = vec![0usize; dim];
        let n_pts = config.points_per_dim;
        loop {
            let mut on_boundary = false;
            for d in 0..dim {
                theta[d] = axes[d][index[d]];
                on_boundary |= index[d] == 0 || index[d] == n_pts - 1;
            }
            let lp: f64 = -0.5 * prior.precision * theta.iter().map(|t| t * t).sum::<f64>();
            let mut ld = 0.0;
            for z in train.examples() {
                ld += model.log_likelihood(&theta, z)?;
            }
            let mut lf = 0.0;
            for z in failures.examples() {
                lf += model.log_likelihood(&theta, z)?;
            }
            log_prior.push(lp);
            log_lik_train.push(ld);
            log_lik_failures.push(lf);
            boundary.push(on_boundary);

            // Mixed-radix increment over the grid indices.
            let mut d = 0;
            loop {
                index[d] += 1;
                if index[d] < n_pts {
                    break;
                }
                index[d] = 0;
                d += 1;
                if d == dim {
                    let oracle = QuadratureOracle {
                        model,
                        train,
                        config,
                        axes,
                        log_prior,
                        log_lik_train,
                        log_lik_failures,
                        boundary,
                    };
                    oracle.check_boundary(|g| oracle.log_prior[g] + oracle.log_lik_train[g])?;
                    oracle.check_boundary(|g| {
                        oracle.log_prior[g] + oracle.log_lik_train[g] + oracle.log_lik_failures[g]
                    })?;
                    return Ok(oracle);
                }
            }
        }
    }

    fn grid_len(&self) -> usize {
        self.log_prior.len()
    }

    /// Fails with the measured boundary mass when the box is too small for
    /// the posterior defined by `log_joint`.
    fn check_boundary(&self, log_joint: impl Fn(usize) -> f64) -> Result<()> {
        let total = log_sum_exp((0..self.grid_len()).map(&log_joint));
        let boundary_terms: Vec<f64> = (0..self.grid_len())
            .filter(|&g| self.boundary[g])
            .map(&log_joint)
            .collect();
        let boundary_mass = (log_sum_exp(boundary_terms.iter().copied()) - total).exp();
        if boundary_mass > self.config.max_boundary_mass {
            return Err(CoreError::InsufficientCoverage { boundary_mass });
        }
        Ok(())
    }

    /// Sum of per-example log-likelihoods of `subset` at every grid point.
    fn log_lik_subset(&self, subset: &Dataset) -> Result<Vec<f64>> {
        let dim = self.axes.len();
        let mut out = vec![0.0; self.grid_len()];
        let mut theta = vec![0.0; dim];
        let mut index = vec![0usize; dim];
        let n_pts = self.config.points_per_dim;
        for slot in out.iter_mut() {
            for d in 0..dim {
                theta[d] = self.axes[d][index[d]];
            }
            let mut acc = 0.0;
            for z in subset.examples() {
                acc += self.model.log_likelihood(&theta, z)?;
            }
            *slot = acc;
            let mut d = 0;
            while d < dim {
                index[d] += 1;
                if index[d] < n_pts {
                    break;
                }
                index[d] = 0;
                d += 1;
            }
        }
        Ok(out)
    }

    /// Direct route: posteriors over `D` and over `D \ C` (summed example by
    /// example, not derived from the full-data likelihood), then
    /// `log p(F|D\C) - log p(F|D)`.
    pub fn log_ratio(&self, causes: &Dataset) -> Result<f64> {
        let cause_ids: std::collections::BTreeSet<u64> =
            causes.examples().iter().map(|z| z.id).collect();
        let retained = self.train.filter_by_id(|id| !cause_ids.contains(&id));
        let ldc = self.log_lik_subset(&retained)?;
        self.check_boundary(|g| self.log_prior[g] + ldc[g])?;

        let n = self.grid_len();
        let lse = |f: &dyn Fn(usize) -> f64| log_sum_exp((0..n).map(f));
        let log_pf_given_dc = lse(&|g| self.log_prior[g] + ldc[g] + self.log_lik_failures[g])
            - lse(&|g| self.log_prior[g] + ldc[g]);
        let log_pf_given_d =
            lse(&|g| self.log_prior[g] + self.log_lik_train[g] + self.log_lik_failures[g])
                - lse(&|g| self.log_prior[g] + self.log_lik_train[g]);
        Ok(log_pf_given_dc - log_pf_given_d)
    }

    /// Predictive route: difference of log-expectations of `p(C|theta)^{-1}`
    /// under the posteriors given `(D, F)` and `D`.
    pub fn log_ratio_predictive(&self, causes: &Dataset) -> Result<f64> {
        let lc = self.log_lik_subset(causes)?;
        let n = self.grid_len();
        let lse = |f: &dyn Fn(usize) -> f64| log_sum_exp((0..n).map(f));
        let joint_df = |g: usize| self.log_prior[g] + self.log_lik_train[g] + self.log_lik_failures[g];
        let joint_d = |g: usize| self.log_prior[g] + self.log_lik_train[g];
        let term_df = lse(&|g| joint_df(g) - lc[g]) - lse(&joint_df);
        let term_d = lse(&|g| joint_d(g) - lc[g]) - lse(&joint_d);
        Ok(term_df - term_d)
    }

    /// First-order form: `E_{p(theta|D)}[log p(C|theta)] -
    /// E_{p(theta|D,F)}[log p(C|theta)]`, with the additivity identity over
    /// the members of `C` verified to 1e-9.
    pub fn taylor_ratio(&self, causes: &Dataset) -> Result<f64> {
        let lc = self.log_lik_subset(causes)?;
        let w_d = self.posterior_weights(|g| self.log_prior[g] + self.log_lik_train[g]);
        let w_df = self.posterior_weights(|g| {
            self.log_prior[g] + self.log_lik_train[g] + self.log_lik_failures[g]
        });
        let expect = |w: &[f64], v: &[f64]| w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let group = expect(&w_d, &lc) - expect(&w_df, &lc);

        let mut per_example_sum = 0.0;
        for z in causes.examples() {
            let singleton = Dataset::new(vec![z.clone()], self.train.num_classes())?;
            let lz = self.log_lik_subset(&singleton)?;
            per_example_sum += expect(&w_d, &lz) - expect(&w_df, &lz);
        }
        let delta = (group - per_example_sum).abs();
        if delta > 1e-9 {
            return Err(CoreError::AdditivityViolation { delta });
        }
        Ok(group)
    }

    /// Exact singleton ratios `r({z})` for every training example, via the
    /// predictive route (one likelihood pass per example).
    pub fn singleton_log_ratios(&self) -> Result<BTreeMap<u64, f64>> {
        let mut out = BTreeMap::new();
        for z in self.train.examples() {
            let singleton = Dataset::new(vec![z.clone()], self.train.num_classes())?;
            out.insert(z.id, self.log_ratio_predictive(&singleton)?);
        }
        Ok(out)
    }

    fn posterior_weights(&self, log_joint: impl Fn(usize) -> f64) -> Vec<f64> {
        let n = self.grid_len();
        let total = log_sum_exp((0..n).map(&log_joint));
        (0..n).map(|g| (log_joint(g) - total).exp()).collect()
    }
}

/// MAP of `log p(D|theta) + log prior` by gradient ascent with backtracking;
/// the target is concave for the logistic models this oracle serves.
pub fn posterior_mode(prior: &GaussianPrior, model: &dyn Model, train: &Dataset) -> Result<Vec<f64>> {
    let dim = model.param_count();
    let mut theta = vec![0.0; dim];
    let objective = |t: &[f64]| -> Result<f64> {
        let mut obj = -0.5 * prior.precision * t.iter().map(|x| x * x).sum::<f64>();
        for z in train.examples() {
            obj += model.log_likelihood(t, z)?;
        }
        Ok(obj)
    };
    let gradient = |t: &[f64]| -> Result<Vec<f64>> {
        let mut g: Vec<f64> = t.iter().map(|x| -prior.precision * x).collect();
        for z in train.examples() {
            let gz = model.grad_log_likelihood(t, z)?;
            for (gi, gzi) in g.iter_mut().zip(&gz) {
                *gi += gzi;
            }
        }
        Ok(g)
    };

    for _ in 0..5000 {
        let g = gradient(&theta)?;
        let gn2: f64 = g.iter().map(|x| x * x).sum();
        if gn2.sqrt() < 1e-12 {
            break;
        }
        let obj0 = objective(&theta)?;
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t + step * gi).collect();
            if objective(&trial)? > obj0 + 1e-4 * step * gn2 {
                theta = trial;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Ok(theta);
            }
        }
    }
    Ok(theta)
}

/// Per-dimension posterior standard deviations from the Laplace covariance
/// (inverse of the finite-difference negative log-posterior Hessian).
fn laplace_stds(
    prior: &GaussianPrior,
    model: &dyn Model,
    train: &Dataset,
    map: &[f64],
) -> Result<Vec<f64>> {
    let dim = map.len();
    let gradient = |t: &[f64]| -> Result<Vec<f64>> {
        let mut g: Vec<f64> = t.iter().map(|x| -prior.precision * x).collect();
        for z in train.examples() {
            let gz = model.grad_log_likelihood(t, z)?;
            for (gi, gzi) in g.iter_mut().zip(&gz) {
                *gi += gzi;
            }
        }
        Ok(g)
    };
    let mut precision = DenseMatrix::zeros(dim);
    for j in 0..dim {
        let h = 1e-5 * map[j].abs().max(1.0);
        let mut plus = map.to_vec();
        plus[j] += h;
        let mut minus = map.to_vec();
        minus[j] -= h;
        let gp = gradient(&plus)?;
        let gm = gradient(&minus)?;
        for i in 0..dim {
            // Negative Hessian of the log posterior.
            *precision.at_mut(i, j) = -(gp[i] - gm[i]) / (2.0 * h);
        }
    }
    // Symmetrise against finite-difference noise.
    for i in 0..dim {
        for j in 0..i {
            let avg = 0.5 * (precision.at(i, j) + precision.at(j, i));
            *precision.at_mut(i, j) = avg;
            *precision.at_mut(j, i) = avg;
        }
    }
    let mut stds = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut unit = vec![0.0; dim];
        unit[d] = 1.0;
        let col = precision.solve(&unit)?;
        if col[d] <= 0.0 || !col[d].is_finite() {
            return Err(CoreError::NonFinite {
                context: "laplace covariance diagonal".into(),
            });
        }
        stds.push(col[d].sqrt());
    }
    Ok(stds)
}

/// One-shot direct-route ratio (builds the grid, evaluates, discards).
pub fn exact_log_ratio(
    prior: &GaussianPrior,
    model: &dyn Model,
    train: &Dataset,
    failures: &Dataset,
    causes: &Dataset,
    config: QuadratureConfig,
) -> Result<f64> {
    QuadratureOracle::new(prior, model, train, failures, config)?.log_ratio(causes)
}

/// One-shot predictive-route ratio.
pub fn exact_log_ratio_predictive(
    prior: &GaussianPrior,
    model: &dyn Model,
    train: &Dataset,
    failures: &Dataset,
    causes: &Dataset,
    config: QuadratureConfig,
) -> Result<f64> {
    QuadratureOracle::new(prior, model, train, failures, config)?.log_ratio_predictive(causes)
}

/// One-shot first-order ratio with the additivity check.
pub fn exact_taylor_ratio(
    prior: &GaussianPrior,
    model: &dyn Model,
    train: &Dataset,
    failures: &Dataset,
    causes: &Dataset,
    config: QuadratureConfig,
) -> Result<f64> {
    QuadratureOracle::new(prior, model, train, failures, config)?.taylor_ratio(causes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodels::{BinaryLogistic, Example};

    fn scalar_dataset(points: &[(f64, usize)], id_start: u64) -> Dataset {
        Dataset::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| Example::new(vec![x], y, id_start + i as u64))
                .collect(),
            2,
        )
        .unwrap()
    }

    fn test_config() -> QuadratureConfig {
        QuadratureConfig {
            points_per_dim: 2001,
            ..Default::default()
        }
    }

    #[test]
    fn empty_cause_set_has_exactly_zero_ratio() {
        let model = BinaryLogistic::new(1);
        let train = scalar_dataset(&[(1.0, 1), (0.5, 1), (-1.0, 0), (2.0, 1), (0.3, 0)], 0);
        let failures = scalar_dataset(&[(1.5, 1)], 100);
        let empty = Dataset::new(Vec::new(), 2).unwrap();
        let oracle = QuadratureOracle::new(
            &GaussianPrior::default(),
            &model,
            &train,
            &failures,
            test_config(),
        )
        .unwrap();
        assert_eq!(oracle.log_ratio(&empty).unwrap(), 0.0);
        assert_eq!(oracle.taylor_ratio(&empty).unwrap(), 0.0);
    }

    #[test]
    fn removing_a_conflicting_duplicate_helps_the_failures() {
        // Mostly-positive evidence plus a duplicated conflicting point; the
        // failure set agrees with the majority, so deleting one copy of the
        // conflict raises p(F | D \ C).
        let model = BinaryLogistic::new(1);
        let train = scalar_dataset(
            &[
                (1.0, 1),
                (0.8, 1),
                (1.2, 1),
                (0.9, 1),
                (1.0, 0), // conflicting copy 1
                (1.0, 0), // conflicting copy 2
            ],
            0,
        );
        let failures = scalar_dataset(&[(1.1, 1), (0.7, 1)], 100);
        let causes = Dataset::new(vec![train.examples()[4].clone()], 2).unwrap();
        let oracle = QuadratureOracle::new(
            &GaussianPrior::default(),
            &model,
            &train,
            &failures,
            test_config(),
        )
        .unwrap();
        let r = oracle.log_ratio(&causes).unwrap();
        assert!(r > 0.0, "ratio {r}");
    }

    #[test]
    fn predictive_and_direct_routes_agree() {
        let model = BinaryLogistic::new(1);
        let train = scalar_dataset(
            &[(0.5, 1), (1.5, 1), (-0.5, 0), (0.8, 0), (2.0, 1), (0.2, 1)],
            0,
        );
        let failures = scalar_dataset(&[(1.0, 1), (0.6, 0)], 100);
        let causes = Dataset::new(
            vec![train.examples()[3].clone(), train.examples()[0].clone()],
            2,
        )
        .unwrap();
        let oracle = QuadratureOracle::new(
            &GaussianPrior::default(),
            &model,
            &train,
            &failures,
            test_config(),
        )
        .unwrap();
        let direct = oracle.log_ratio(&causes).unwrap();
        let predictive = oracle.log_ratio_predictive(&causes).unwrap();
        assert!(
            (direct - predictive).abs() < 1e-6,
            "direct {direct} vs predictive {predictive}"
        );
    }

    #[test]
    fn taylor_singleton_equals_group_of_one() {
        let model = BinaryLogistic::new(1);
        let train = scalar_dataset(&[(1.0, 1), (-0.6, 0), (0.4, 1), (1.3, 0)], 0);
        let failures = scalar_dataset(&[(0.9, 1)], 50);
        let oracle = QuadratureOracle::new(
            &GaussianPrior::default(),
            &model,
            &train,
            &failures,
            test_config(),
        )
        .unwrap();
        let singleton = Dataset::new(vec![train.examples()[1].clone()], 2).unwrap();
        // The additivity check inside taylor_ratio is the assertion; a
        // single element reduces it to group == singleton by construction.
        let r = oracle.taylor_ratio(&singleton).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn taylor_gap_shrinks_with_failure_weight() {
        // The first-order form approaches the exact ratio as the failure
        // set shrinks (the posterior update it linearises becomes small).
        let model = BinaryLogistic::new(1);
        let train = scalar_dataset(
            &[(1.0, 1), (0.5, 1), (-0.8, 0), (1.4, 1), (-0.2, 0), (0.9, 0)],
            0,
        );
        let causes = Dataset::new(vec![train.examples()[5].clone()], 2).unwrap();
        let fail_points = [(1.2, 1), (0.8, 1), (1.0, 1), (0.6, 1)];
        let mut gaps = Vec::new();
        for &size in &[4usize, 2, 1] {
            let failures = scalar_dataset(&fail_points[..size], 200);
            let oracle = QuadratureOracle::new(
                &GaussianPrior::default(),
                &model,
                &train,
                &failures,
                test_config(),
            )
            .unwrap();
            let exact = oracle.log_ratio(&causes).unwrap();
            let taylor = oracle.taylor_ratio(&causes).unwrap();
            gaps.push((exact - taylor).abs());
        }
        assert!(
            gaps[0] > gaps[1] && gaps[1] > gaps[2],
            "gaps not shrinking: {gaps:?}"
        );
    }

    #[test]
    fn boundary_mass_violation_is_reported() {
        let model = BinaryLogistic::new(1);
        let train = scalar_dataset(&[(1.0, 1), (-1.0, 0)], 0);
        let failures = scalar_dataset(&[(1.0, 1)], 10);
        let config = QuadratureConfig {
            points_per_dim: 51,
            half_width_sds: 0.5, // far too narrow
            max_boundary_mass: 1e-8,
        };
        match QuadratureOracle::new(&GaussianPrior::default(), &model, &train, &failures, config) {
            Err(CoreError::InsufficientCoverage { boundary_mass }) => {
                assert!(boundary_mass > 1e-8);
            }
            other => panic!("expected InsufficientCoverage, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn two_parameter_grid_works() {
        let model = BinaryLogistic::new(2);
        let examples: Vec<Example> = (0..12)
            .map(|i| {
                let x0 = ((i % 4) as f64 - 1.5) / 1.5;
                let x1 = ((i % 3) as f64 - 1.0) / 1.0;
                Example::new(vec![x0, x1], ((x0 + 0.5 * x1) > 0.0) as usize, i as u64)
            })
            .collect();
        let train = Dataset::new(examples, 2).unwrap();
        let failures = scalar_dataset_2d(&[([0.5, 0.5], 1)], 100);
        let config = QuadratureConfig {
            points_per_dim: 301,
            ..Default::default()
        };
        let oracle = QuadratureOracle::new(
            &GaussianPrior::default(),
            &model,
            &train,
            &failures,
            config,
        )
        .unwrap();
        let causes = Dataset::new(vec![train.examples()[0].clone()], 2).unwrap();
        let direct = oracle.log_ratio(&causes).unwrap();
        let predictive = oracle.log_ratio_predictive(&causes).unwrap();
        assert!((direct - predictive).abs() < 1e-6);
    }

    fn scalar_dataset_2d(points: &[([f64; 2], usize)], id_start: u64) -> Dataset {
        Dataset::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| Example::new(x.to_vec(), y, id_start + i as u64))
                .collect(),
            2,
        )
        .unwrap()
    }
}
