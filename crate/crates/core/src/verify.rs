//! Runnable oracle suite: every approximation in the crate checked against
//! an independent reference at a pinned tolerance. The CLI `verify`
//! subcommand runs these and the acceptance tests assert them; none of the
//! checks needs external data.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::synth::two_blob_dataset;
use crate::diffmodels::{
    dataset_grad_log_likelihood, grad_log_likelihood, log_likelihood, Activation, BinaryLogistic,
    Dataset, Example, GaussianLinearModel, LayoutEntry, Model, ModelSpec, OptimizerConfig,
    ParameterVector,
};
use crate::error::Result;
use crate::identify::{
    ewc_influence, linear_influence, posterior_mode, GaussianPrior, InfluenceReport,
    QuadratureConfig, QuadratureOracle,
};
use crate::posterior::{
    empirical_fisher_diag, ewc_adapt, fisher_full, natural_gradient_step, solve_fisher_cg,
    AdaptSign, EwcConfig, FisherSolver, PosteriorApprox,
};
use crate::stats::{kendall_tau, spearman_rho};
use crate::treat::{ewc_deletion, newton_removal};

/// Outcome of one oracle check.
#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub passed: bool,
    /// The quantity the check measured (an error, a correlation, ...).
    pub measured: f64,
    pub threshold: f64,
    /// How `measured` relates to `threshold` when the check passes.
    pub comparison: &'static str,
    pub seconds: f64,
    pub detail: String,
}

impl VerifyCheck {
    fn finish(
        name: &'static str,
        start: Instant,
        measured: f64,
        threshold: f64,
        comparison: &'static str,
        detail: String,
    ) -> Self {
        let passed = match comparison {
            "<" => measured < threshold,
            "<=" => measured <= threshold,
            ">=" => measured >= threshold,
            other => unreachable!("comparison {other}"),
        };
        VerifyCheck {
            name,
            passed,
            measured,
            threshold,
            comparison,
            seconds: start.elapsed().as_secs_f64(),
            detail,
        }
    }
}

/// Every check, in dependency order. All run on synthetic data only.
pub fn run_all() -> Result<Vec<VerifyCheck>> {
    Ok(vec![
        check_gradient_fidelity()?,
        check_fisher_identities()?,
        check_predictive_identity()?,
        check_taylor_additivity()?,
        check_linear_sign()?,
        check_oracle_rank_fidelity()?,
        check_first_order_consistency()?,
        check_conjugate_exactness()?,
    ])
}

/// Analytic gradients against central finite differences: 100 coordinates
/// over 10 seeded logistic and MLP instances.
pub fn check_gradient_fidelity() -> Result<VerifyCheck> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let spec = if seed % 2 == 0 {
            ModelSpec::logistic(5, 3)
        } else {
            ModelSpec::mlp(5, vec![7, 4], 3, Activation::Tanh)
        };
        let params = spec.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let z = Example::new(
            (0..5).map(|_| rng.gen_range(0.0..1.0)).collect(),
            rng.gen_range(0..3),
            0,
        );
        let grad = grad_log_likelihood(&spec, &params, &z)?;
        let h = 1e-5;
        for _ in 0..100 {
            let i = rng.gen_range(0..params.values.len());
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let fd =
                (log_likelihood(&spec, &plus, &z)? - log_likelihood(&spec, &minus, &z)?) / (2.0 * h);
            let denom = fd.abs().max(grad.values[i].abs()).max(1e-8);
            worst = worst.max((fd - grad.values[i]).abs() / denom);
        }
    }
    Ok(VerifyCheck::finish(
        "gradient-fidelity",
        start,
        worst,
        1e-4,
        "<",
        "max relative error, analytic vs central differences, 10 seeds x 100 coordinates".into(),
    ))
}

/// Diagonal-of-full identity (bitwise at one-chunk scale) and conjugate
/// gradients against a dense solve on a <= 200 parameter model.
pub fn check_fisher_identities() -> Result<VerifyCheck> {
    let start = Instant::now();
    let spec = ModelSpec::mlp(10, vec![8], 4, Activation::Tanh);
    let params = spec.init_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let examples: Vec<Example> = (0..56)
        .map(|i| {
            Example::new(
                (0..10).map(|_| rng.gen_range(0.0..1.0)).collect(),
                rng.gen_range(0..4),
                i,
            )
        })
        .collect();
    let data = Dataset::new(examples, 4)?;

    let diag = empirical_fisher_diag(&spec, &params.values, &data)?;
    let full = fisher_full(&spec, &params.values, &data)?;
    let mut diag_gap: f64 = 0.0;
    for i in 0..full.dim {
        diag_gap = diag_gap.max((full.at(i, i) - diag[i]).abs());
    }

    let post = PosteriorApprox::new(params, diag, data.len(), 1e-3)?;
    let mut damped = full.clone();
    damped.add_diagonal(post.damping);
    let rhs: Vec<f64> = (0..post.dim()).map(|i| ((i % 7) as f64 - 3.0) / 3.0).collect();
    let direct = damped.solve(&rhs)?;
    let cg = solve_fisher_cg(&post, &spec, &data, &rhs, 1e-10, 2000)?;
    let num: f64 = direct
        .iter()
        .zip(&cg)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = direct.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cg_err = num / den;

    let measured = if diag_gap > 0.0 { 1.0 } else { cg_err };
    Ok(VerifyCheck::finish(
        "fisher-identities",
        start,
        measured,
        1e-3,
        "<",
        format!("diag-vs-full max gap {diag_gap:.1e} (must be 0); cg-vs-dense relative error {cg_err:.2e}"),
    ))
}

fn random_scalar_instance(
    seed: u64,
    n_train: usize,
    n_fail: usize,
    n_causes: usize,
) -> Result<(Dataset, Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_true = rng.gen_range(0.5..2.0);
    let model = BinaryLogistic::new(1);
    let mut make = |count: usize, id0: u64| -> Result<Dataset> {
        let examples = (0..count)
            .map(|i| {
                let x: f64 = rng.gen_range(-2.0..2.0);
                let p1 = model
                    .predict(&[theta_true], &[x])
                    .expect("1-d predict")[1];
                let y = (rng.gen::<f64>() < p1) as usize;
                Example::new(vec![x], y, id0 + i as u64)
            })
            .collect();
        Dataset::new(examples, 2)
    };
    let train = make(n_train, 0)?;
    let failures = make(n_fail, 10_000)?;
    let cause_ids: BTreeSet<u64> = (0..n_causes as u64).collect();
    let causes = train.keep_ids(&cause_ids);
    Ok((train, failures, causes))
}

/// The two independent quadrature routes for `r(C)` agree to 1e-6 over 20
/// random draws of (train set, failure set, cause set).
pub fn check_predictive_identity() -> Result<VerifyCheck> {
    let start = Instant::now();
    let model = BinaryLogistic::new(1);
    let config = QuadratureConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (train, failures, causes) =
            random_scalar_instance(7000 + seed, 12, 3, 2 + (seed % 3) as usize)?;
        let oracle =
            QuadratureOracle::new(&GaussianPrior::default(), &model, &train, &failures, config)?;
        let direct = oracle.log_ratio(&causes)?;
        let predictive = oracle.log_ratio_predictive(&causes)?;
        worst = worst.max((direct - predictive).abs());
    }
    Ok(VerifyCheck::finish(
        "predictive-identity",
        start,
        worst,
        1e-6,
        "<",
        "max |direct - predictive| over 20 random draws, 2001-point grids".into(),
    ))
}

/// Group additivity of the first-order ratio: every split of every cause
/// set of size <= 4 sums to the group value within 1e-9.
pub fn check_taylor_additivity() -> Result<VerifyCheck> {
    let start = Instant::now();
    let model = BinaryLogistic::new(1);
    let config = QuadratureConfig::default();
    let mut worst: f64 = 0.0;
    for seed in 0..4u64 {
        let (train, failures, causes) = random_scalar_instance(9100 + seed, 10, 3, 4)?;
        let oracle =
            QuadratureOracle::new(&GaussianPrior::default(), &model, &train, &failures, config)?;
        let ids: Vec<u64> = causes.examples().iter().map(|z| z.id).collect();
        // Ratio of every subset, indexed by bitmask.
        let mut ratios = vec![0.0f64; 1 << ids.len()];
        for mask in 1usize..(1 << ids.len()) {
            let subset_ids: BTreeSet<u64> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &id)| id)
                .collect();
            let subset = causes.keep_ids(&subset_ids);
            ratios[mask] = oracle.taylor_ratio(&subset)?;
        }
        let full = (1 << ids.len()) - 1;
        for mask in 1usize..(1 << ids.len()) {
            let complement = full & !mask;
            if complement == 0 {
                continue;
            }
            worst = worst.max((ratios[mask] + ratios[complement] - ratios[full]).abs());
        }
    }
    Ok(VerifyCheck::finish(
        "taylor-additivity",
        start,
        worst,
        1e-9,
        "<",
        "max |r(C1) + r(C2) - r(C)| over all two-part splits, |C| = 4, 4 seeds".into(),
    ))
}

/// Linear-influence scorer signature, injectable so a mutation fixture can
/// prove the sign check actually bites.
pub type LinearScorer = dyn Fn(
    &PosteriorApprox,
    &dyn Model,
    &Dataset,
    &Dataset,
    f64,
    &FisherSolver,
) -> Result<InfluenceReport>;

/// The singleton-query linear score equals the negation of the classic
/// first-order influence value computed independently via a dense solve.
pub fn check_linear_sign() -> Result<VerifyCheck> {
    check_linear_sign_with(&|p, m, t, f, g, s| linear_influence(p, m, t, f, g, s))
}

pub fn check_linear_sign_with(scorer: &LinearScorer) -> Result<VerifyCheck> {
    let start = Instant::now();
    let train = two_blob_dataset(40, 1.5, 0.8, 11);
    let spec = ModelSpec::logistic(2, 2);
    let fitted = crate::diffmodels::train(
        &spec,
        &spec.init_params(2),
        &train,
        &OptimizerConfig {
            max_epochs: 30,
            ..Default::default()
        },
    )?;
    let diag = empirical_fisher_diag(&spec, &fitted.values, &train)?;
    let post = PosteriorApprox::new(fitted, diag, train.len(), 1e-4)?;
    let probe = two_blob_dataset(6, 1.5, 0.8, 77);
    let singleton = Dataset::new(vec![probe.examples()[0].clone()], 2)?;

    let report = scorer(
        &post,
        &spec,
        &train,
        &singleton,
        1.0,
        &FisherSolver::Cg {
            model: &spec,
            data: &train,
            tol: 1e-10,
            max_iter: 1000,
        },
    )?;

    let mut dense = fisher_full(&spec, &post.theta_hat.values, &train)?;
    dense.add_diagonal(post.damping);
    let g_test = spec.grad_log_likelihood(&post.theta_hat.values, &singleton.examples()[0])?;
    let u = dense.solve(&g_test)?;
    let mut worst: f64 = 0.0;
    for z in train.examples() {
        let g_z = spec.grad_log_likelihood(&post.theta_hat.values, z)?;
        let classic: f64 = u.iter().zip(&g_z).map(|(a, b)| a * b).sum();
        let scale = classic.abs().max(1e-8);
        worst = worst.max((report.scores[&z.id] + classic).abs() / scale);
    }
    Ok(VerifyCheck::finish(
        "linear-influence-sign",
        start,
        worst,
        1e-3,
        "<",
        "max relative |score + classic influence| over the training set (singleton query, gamma 1)"
            .into(),
    ))
}

/// Spearman correlation between the fast penalised scores and the exact
/// quadrature singleton ratios on 1-2 parameter instances with 10% flipped
/// labels, 5 seeds.
pub fn check_oracle_rank_fidelity() -> Result<VerifyCheck> {
    let start = Instant::now();
    let mut worst_rho = f64::INFINITY;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let dim = 1 + (seed % 2) as usize;
        let rho = oracle_rank_fidelity_instance(seed, dim)?;
        details.push(format!("seed {seed} (dim {dim}): rho {rho:.3}"));
        worst_rho = worst_rho.min(rho);
    }
    Ok(VerifyCheck::finish(
        "oracle-rank-fidelity",
        start,
        worst_rho,
        0.9,
        ">=",
        details.join("; "),
    ))
}

fn oracle_rank_fidelity_instance(seed: u64, dim: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(31_000 + seed);
    let model = BinaryLogistic::new(dim);
    let theta_true: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.8..1.8)).collect();
    let mut make = |count: usize, id0: u64| -> Vec<Example> {
        (0..count)
            .map(|i| {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let logit: f64 = theta_true.iter().zip(&x).map(|(t, xi)| t * xi).sum();
                let p1 = 1.0 / (1.0 + (-logit).exp());
                let y = (rng.gen::<f64>() < p1) as usize;
                Example::new(x, y, id0 + i as u64)
            })
            .collect()
    };
    // 30 training points, 10% flipped.
    let mut train_examples = make(30, 0);
    for z in train_examples.iter_mut().take(3) {
        z.label = 1 - z.label;
    }
    let train = Dataset::new(train_examples, 2)?;
    let prior = GaussianPrior::default();

    // Anchor at the regularised MAP of the noisy data (same prior as the
    // oracle integrals).
    let map = posterior_mode(&prior, &model, &train)?;
    let fisher = empirical_fisher_diag(&model, &map, &train)?;
    let layout = vec![LayoutEntry {
        name: "w".into(),
        shape: vec![dim],
    }];
    let theta_hat = ParameterVector::new(map.clone(), layout)?;
    let post = PosteriorApprox::new(theta_hat, fisher, train.len(), 0.0)?;

    // Failures: misclassified members of a fresh test draw.
    let test_examples = make(200, 50_000);
    let mut failures = Vec::new();
    for z in &test_examples {
        let probs = model.predict(&map, &z.input)?;
        if crate::diffmodels::argmax_class(&probs) != z.label {
            failures.push(z.clone());
        }
    }
    let failures = Dataset::new(failures, 2)?;

    let cfg = EwcConfig {
        lambda_prior: 0.0,
        penalty_scale: 1.0,
        opt: OptimizerConfig {
            learning_rate: 0.02,
            batch_size: 64,
            max_epochs: 3000,
            patience: 40,
            validation_fraction: 0.0,
            seed,
        },
        sign: AdaptSign::Learn,
        validation: None,
    };
    let report = ewc_influence(&post, &model, &train, &failures, &cfg)?;

    let quad = QuadratureConfig {
        points_per_dim: if dim == 1 { 2001 } else { 501 },
        ..Default::default()
    };
    let oracle = QuadratureOracle::new(&prior, &model, &train, &failures, quad)?;
    let exact = oracle.singleton_log_ratios()?;

    let ids: Vec<u64> = train.examples().iter().map(|z| z.id).collect();
    let fast: Vec<f64> = ids.iter().map(|id| report.scores[id]).collect();
    let gold: Vec<f64> = ids.iter().map(|id| exact[id]).collect();
    Ok(spearman_rho(&fast, &gold))
}

/// Ranking agreement between the penalised and linear scores as the
/// adaptation strength shrinks, plus the quadratic decay of the parameter
/// gap between the adaptation optimum and the one-step update.
pub fn check_first_order_consistency() -> Result<VerifyCheck> {
    let start = Instant::now();

    // Part 1: Kendall tau at a decaying gamma grid.
    let train = two_blob_dataset(60, 2.0, 0.7, 8);
    let queries = two_blob_dataset(20, 2.0, 0.7, 1008);
    let spec = ModelSpec::logistic(2, 2);
    let fitted = crate::diffmodels::train(
        &spec,
        &spec.init_params(8),
        &train,
        &OptimizerConfig {
            max_epochs: 25,
            ..Default::default()
        },
    )?;
    let fisher = empirical_fisher_diag(&spec, &fitted.values, &train)?;
    let post = PosteriorApprox::new(fitted, fisher, train.len(), 0.0)?;
    let linear = linear_influence(&post, &spec, &train, &queries, 1.0, &FisherSolver::Diag)?;
    let lin_scores: Vec<f64> = train
        .examples()
        .iter()
        .map(|z| linear.scores[&z.id])
        .collect();
    let mut tau_last = -1.0;
    for &gamma in &[0.1, 0.0125, 0.0015625, 0.000195] {
        let cfg = EwcConfig {
            lambda_prior: 0.0,
            penalty_scale: EwcConfig::penalty_scale_for_gamma(gamma, post.n_train),
            opt: OptimizerConfig {
                learning_rate: 0.005,
                batch_size: 32,
                max_epochs: 8000,
                patience: 60,
                validation_fraction: 0.0,
                seed: 2,
            },
            sign: AdaptSign::Learn,
            validation: None,
        };
        let ewc = ewc_influence(&post, &spec, &train, &queries, &cfg)?;
        let ewc_scores: Vec<f64> = train
            .examples()
            .iter()
            .map(|z| ewc.scores[&z.id])
            .collect();
        tau_last = kendall_tau(&lin_scores, &ewc_scores);
    }

    // Part 2: gap(gamma) between the adaptation optimum and the matched
    // natural-gradient step quarters when gamma halves.
    let bin = BinaryLogistic::new(1);
    let anchor_examples: Vec<Example> = (0..20)
        .map(|i| {
            let x = (i as f64 - 10.0) / 5.0;
            Example::new(vec![x], (i % 2) as usize, i as u64)
        })
        .collect();
    let anchor_data = Dataset::new(anchor_examples, 2)?;
    let layout = vec![LayoutEntry {
        name: "w".into(),
        shape: vec![1],
    }];
    let theta0 = ParameterVector::new(vec![0.4], layout)?;
    let bfisher = empirical_fisher_diag(&bin, &theta0.values, &anchor_data)?;
    let bpost = PosteriorApprox::new(theta0.clone(), bfisher, anchor_data.len(), 0.0)?;
    let fail_examples: Vec<Example> = (0..6)
        .map(|i| Example::new(vec![0.4 + i as f64 / 10.0], 1, 100 + i as u64))
        .collect();
    let fails = Dataset::new(fail_examples, 2)?;
    let grad = ParameterVector {
        values: dataset_grad_log_likelihood(&bin, &theta0.values, &fails)?,
        layout: theta0.layout.clone(),
    };
    let gap = |gamma: f64| -> Result<f64> {
        let cfg = EwcConfig {
            lambda_prior: 0.0,
            penalty_scale: 1.0 / (gamma * bpost.n_train as f64),
            opt: OptimizerConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs: 30000,
                patience: 80,
                validation_fraction: 0.0,
                seed: 5,
            },
            sign: AdaptSign::Learn,
            validation: None,
        };
        let adapted = ewc_adapt(&bpost, &bin, &fails, &cfg)?;
        let ng = natural_gradient_step(&bpost, &grad, gamma, &FisherSolver::Diag)?;
        Ok(adapted
            .values
            .iter()
            .zip(&ng.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    };
    let gammas = [0.04, 0.02, 0.01, 0.005];
    let mut gaps = Vec::new();
    for &g in &gammas {
        gaps.push(gap(g)?);
    }
    let mut worst_ratio_dev: f64 = 0.0;
    for w in gaps.windows(2) {
        worst_ratio_dev = worst_ratio_dev.max((w[0] / w[1] - 4.0).abs());
    }

    let passed_ratio = worst_ratio_dev <= 1.2; // 4 +- 30%
    let measured = if passed_ratio { tau_last } else { -1.0 };
    Ok(VerifyCheck::finish(
        "first-order-consistency",
        start,
        measured,
        0.95,
        ">=",
        format!(
            "tau at smallest gamma {tau_last:.3}; halving-ratio max deviation from 4: {worst_ratio_dev:.2} (gaps {gaps:?})"
        ),
    ))
}

/// Deletion on the unit-variance Gaussian model recovers the exact
/// deleted-posterior mean, and the one-step natural-gradient deletion
/// equals the one-step fixed-point iterate.
pub fn check_conjugate_exactness() -> Result<VerifyCheck> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let ys: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets: HashMap<u64, f64> = ys.iter().enumerate().map(|(i, &y)| (i as u64, y)).collect();
    let model = GaussianLinearModel::new(1, 1.0, targets);
    let examples: Vec<Example> = ys
        .iter()
        .enumerate()
        .map(|(i, _)| Example::new(vec![1.0], 0, i as u64))
        .collect();
    let data = Dataset::new(examples, 1)?;
    let n = ys.len();
    let theta_hat = ys.iter().sum::<f64>() / n as f64;
    let layout = vec![LayoutEntry {
        name: "w".into(),
        shape: vec![1],
    }];
    let post = PosteriorApprox::new(
        ParameterVector::new(vec![theta_hat], layout)?,
        vec![1.0],
        n,
        0.0,
    )?;
    let cause_ids: BTreeSet<u64> = [1u64, 6, 11, 16].into_iter().collect();
    let causes = data.keep_ids(&cause_ids);
    let retained = data.remove_ids(&cause_ids);
    let deleted_sum: f64 = cause_ids.iter().map(|&i| ys[i as usize]).sum();
    let exact = (n as f64 * theta_hat - deleted_sum) / (n - cause_ids.len()) as f64;

    let cfg = EwcConfig {
        lambda_prior: 0.0,
        penalty_scale: 1.0,
        opt: OptimizerConfig {
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 20000,
            patience: 60,
            validation_fraction: 0.0,
            seed: 7,
        },
        sign: AdaptSign::Unlearn,
        validation: None,
    };
    let deletion = ewc_deletion(&post, &model, &causes, &cfg, &retained)?;
    let mean_err = (deletion.theta_repaired.values[0] - exact).abs();

    // One-step consistency at matched step size.
    let penalty = 1.0;
    let gamma = 1.0 / (penalty * n as f64);
    let newton = newton_removal(&post, &model, &causes, gamma, &FisherSolver::Diag)?;
    let grad_c = dataset_grad_log_likelihood(&model, &post.theta_hat.values, &causes)?;
    let iterate = theta_hat - grad_c[0] / (penalty * n as f64 * 1.0);
    let newton_err = (newton.theta_repaired.values[0] - iterate).abs();

    let measured = mean_err.max(newton_err);
    Ok(VerifyCheck::finish(
        "conjugate-exactness",
        start,
        measured,
        1e-6,
        "<",
        format!("deleted-mean error {mean_err:.2e}; newton-vs-fixed-point error {newton_err:.2e}"),
    ))
}

/// Plain-text table of the check results.
pub fn render_table(checks: &[VerifyCheck]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<26} {:<6} {:>12} {:>4} {:>10} {:>8}\n",
        "check", "status", "measured", "", "threshold", "seconds"
    ));
    for c in checks {
        out.push_str(&format!(
            "{:<26} {:<6} {:>12.4e} {:>4} {:>10.1e} {:>8.2}\n",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.measured,
            c.comparison,
            c.threshold,
            c.seconds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for check in [
            check_gradient_fidelity().unwrap(),
            check_fisher_identities().unwrap(),
            check_linear_sign().unwrap(),
        ] {
            assert!(check.passed, "{}: {:?}", check.name, check);
        }
    }

    #[test]
    fn mutated_scorer_fails_the_sign_check() {
        // Mutation fixture: a scorer with the sign of the interaction term
        // flipped must be caught.
        let mutated: Box<LinearScorer> = Box::new(|p, m, t, f, g, s| {
            let report = linear_influence(p, m, t, f, g, s)?;
            let flipped = report
                .scores
                .iter()
                .map(|(&id, &v)| (id, -v))
                .collect();
            InfluenceReport::new(
                flipped,
                report.method,
                report.query_fingerprint.clone(),
                report.hyperparams.clone(),
            )
        });
        let check = check_linear_sign_with(&mutated).unwrap();
        assert!(!check.passed, "sign mutation went undetected");
    }

    #[test]
    fn table_renders_every_check() {
        let checks = vec![check_gradient_fidelity().unwrap()];
        let table = render_table(&checks);
        assert!(table.contains("gradient-fidelity"));
        assert!(table.contains("pass"));
    }
}
