//! Treatment: erase the influence of an identified cause set from the
//! trained model. Four routes, all warm-started from the trained point:
//! fine-tuning on the corrected data, a single natural-gradient deletion
//! step, penalised unlearning, and the direct fine-tune-on-failures
//! baseline with an L2 locality constraint.

use serde::{Deserialize, Serialize};

use crate::diffmodels::{
    dataset_grad_log_likelihood, train_detailed, Dataset, Model, ModelSpec, OptimizerConfig,
    ParameterVector,
};
use crate::error::{CoreError, Result};
use crate::posterior::{
    ewc_adapt_detailed, natural_gradient_step, AdaptSign, EwcConfig, FisherSolver, PosteriorApprox,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreatmentMethod {
    FinetuneRemoval,
    Newton,
    EwcDeletion,
    FinetuneFailures,
}

/// Repaired parameters with the method and stopping history that produced
/// them.
#[derive(Debug, Clone)]
pub struct TreatmentOutcome {
    pub theta_repaired: ParameterVector,
    pub method: TreatmentMethod,
    pub hyperparams: serde_json::Value,
    pub steps_taken: usize,
    pub early_stop_reason: String,
}

/// Warm-start maximum-likelihood fine-tuning on `D \ C` with the standard
/// optimiser and early stopping.
pub fn finetune_removal(
    spec: &ModelSpec,
    theta_hat: &ParameterVector,
    train_minus_c: &Dataset,
    opt: &OptimizerConfig,
) -> Result<TreatmentOutcome> {
    if train_minus_c.is_empty() {
        return Err(CoreError::EmptyData {
            context: "finetune_removal retained data".into(),
        });
    }
    let outcome = train_detailed(spec, theta_hat, train_minus_c, opt)?;
    Ok(TreatmentOutcome {
        theta_repaired: outcome.params,
        method: TreatmentMethod::FinetuneRemoval,
        hyperparams: serde_json::json!({
            "learning_rate": opt.learning_rate,
            "batch_size": opt.batch_size,
            "max_epochs": opt.max_epochs,
            "patience": opt.patience,
            "seed": opt.seed,
        }),
        steps_taken: outcome.epochs_run,
        early_stop_reason: if outcome.early_stopped {
            "patience".into()
        } else {
            "max-epochs".into()
        },
    })
}

/// One natural-gradient descent step on the cause-set log-likelihood:
/// `theta_hat - gamma * solve(F, grad log p(C | theta_hat))`. No iteration.
pub fn newton_removal(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    causes: &Dataset,
    gamma: f64,
    solver: &FisherSolver,
) -> Result<TreatmentOutcome> {
    if causes.is_empty() {
        return Err(CoreError::EmptyData {
            context: "newton_removal cause set".into(),
        });
    }
    let grad = ParameterVector {
        values: dataset_grad_log_likelihood(model, &posterior.theta_hat.values, causes)?,
        layout: posterior.theta_hat.layout.clone(),
    };
    let theta = natural_gradient_step(posterior, &grad, -gamma, solver)?;
    Ok(TreatmentOutcome {
        theta_repaired: theta,
        method: TreatmentMethod::Newton,
        hyperparams: serde_json::json!({
            "gamma": gamma,
            "solver": solver.name(),
            "damping": posterior.damping,
        }),
        steps_taken: 1,
        early_stop_reason: "single-step".into(),
    })
}

/// Penalised unlearning of the cause set, early-stopped on accuracy over a
/// validation slice of the failure query set.
pub fn ewc_deletion(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    causes: &Dataset,
    cfg: &EwcConfig,
    validation: &Dataset,
) -> Result<TreatmentOutcome> {
    if cfg.sign != AdaptSign::Unlearn {
        return Err(CoreError::invalid_config(
            "ewc_deletion requires sign = unlearn",
        ));
    }
    if validation.is_empty() {
        return Err(CoreError::EmptyData {
            context: "ewc_deletion validation slice".into(),
        });
    }
    let mut cfg = cfg.clone();
    cfg.validation = Some(validation.clone());
    let outcome = ewc_adapt_detailed(posterior, model, causes, &cfg)?;
    Ok(TreatmentOutcome {
        theta_repaired: outcome.params,
        method: TreatmentMethod::EwcDeletion,
        hyperparams: serde_json::json!({
            "penalty_scale": cfg.penalty_scale,
            "lambda_prior": cfg.lambda_prior,
            "learning_rate": cfg.opt.learning_rate,
            "max_epochs": cfg.opt.max_epochs,
            "patience": cfg.opt.patience,
            "seed": cfg.opt.seed,
        }),
        steps_taken: outcome.epochs_run,
        early_stop_reason: outcome.early_stop_reason,
    })
}

/// Direct adaptation on the failure query set with an L2 locality anchor:
/// ascent on `log p(F_q | theta) - (l2_weight / 2) ||theta - theta_hat||^2`,
/// early-stopped on a held-out slice of the query set.
pub fn finetune_failures(
    model: &dyn Model,
    theta_hat: &ParameterVector,
    f_q: &Dataset,
    l2_weight: f64,
    opt: &OptimizerConfig,
) -> Result<TreatmentOutcome> {
    if f_q.is_empty() {
        return Err(CoreError::EmptyData {
            context: "finetune_failures query set".into(),
        });
    }
    if l2_weight < 0.0 || !l2_weight.is_finite() {
        return Err(CoreError::invalid_config("l2_weight must be non-negative"));
    }
    // The anchored objective is the adaptation objective with a zero Fisher
    // quadratic and the L2 weight as the prior term.
    let posterior = PosteriorApprox::new(
        theta_hat.clone(),
        vec![0.0; theta_hat.values.len()],
        1,
        0.0,
    )?;
    let cfg = EwcConfig {
        lambda_prior: l2_weight,
        penalty_scale: 1.0,
        opt: opt.clone(),
        sign: AdaptSign::Learn,
        validation: None,
    };
    let outcome = ewc_adapt_detailed(&posterior, model, f_q, &cfg)?;
    Ok(TreatmentOutcome {
        theta_repaired: outcome.params,
        method: TreatmentMethod::FinetuneFailures,
        hyperparams: serde_json::json!({
            "l2_weight": l2_weight,
            "learning_rate": opt.learning_rate,
            "max_epochs": opt.max_epochs,
            "patience": opt.patience,
            "seed": opt.seed,
        }),
        steps_taken: outcome.epochs_run,
        early_stop_reason: outcome.early_stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::two_blob_dataset;
    use crate::datasets::{flip_labels, split_failures, ConfusionMatrix};
    use crate::diffmodels::{
        accuracy, dataset_log_likelihood, train, Example, GaussianLinearModel, LayoutEntry,
        ModelSpec,
    };
    use crate::posterior::empirical_fisher_diag;
    use approx::assert_relative_eq;
    use std::collections::{BTreeSet, HashMap};

    fn trained_setup(seed: u64) -> (ModelSpec, Dataset, ParameterVector, PosteriorApprox) {
        let data = two_blob_dataset(60, 2.0, 0.7, seed);
        let spec = ModelSpec::logistic(2, 2);
        let fitted = train(
            &spec,
            &spec.init_params(seed),
            &data,
            &OptimizerConfig {
                max_epochs: 25,
                ..Default::default()
            },
        )
        .unwrap();
        let fisher = empirical_fisher_diag(&spec, &fitted.values, &data).unwrap();
        let post = PosteriorApprox::new(fitted.clone(), fisher, data.len(), 1e-4).unwrap();
        (spec, data, fitted, post)
    }

    #[test]
    fn warm_start_identities() {
        let (spec, data, fitted, post) = trained_setup(1);
        // Zero epochs of fine-tuning.
        let zero_epochs = finetune_removal(
            &spec,
            &fitted,
            &data,
            &OptimizerConfig {
                max_epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(zero_epochs.theta_repaired.values, fitted.values);
        // Gamma zero deletion step.
        let causes = Dataset::new(data.examples()[..5].to_vec(), 2).unwrap();
        let newton = newton_removal(&post, &spec, &causes, 0.0, &FisherSolver::Diag).unwrap();
        assert_eq!(newton.theta_repaired.values, fitted.values);
        // Infinite penalty unlearning.
        let val = Dataset::new(data.examples()[5..10].to_vec(), 2).unwrap();
        let cfg = EwcConfig {
            lambda_prior: 0.0,
            penalty_scale: 1e14,
            opt: OptimizerConfig {
                max_epochs: 8,
                ..Default::default()
            },
            sign: AdaptSign::Unlearn,
            validation: None,
        };
        let ewc = ewc_deletion(&post, &spec, &causes, &cfg, &val).unwrap();
        assert_eq!(ewc.theta_repaired.values, fitted.values);
        // Infinite L2 weight on the failure fine-tune.
        let ff = finetune_failures(
            &spec,
            &fitted,
            &causes,
            1e14,
            &OptimizerConfig {
                max_epochs: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ff.theta_repaired.values, fitted.values);
    }

    #[test]
    fn identity_fisher_newton_is_a_plain_gradient_step() {
        let (spec, data, fitted, _) = trained_setup(2);
        let post = PosteriorApprox::new(fitted.clone(), vec![1.0; 6], data.len(), 0.0).unwrap();
        let causes = Dataset::new(data.examples()[..7].to_vec(), 2).unwrap();
        let gamma = 0.3;
        let out = newton_removal(&post, &spec, &causes, gamma, &FisherSolver::Diag).unwrap();
        let grad = dataset_grad_log_likelihood(&spec, &fitted.values, &causes).unwrap();
        for ((o, t), g) in out
            .theta_repaired
            .values
            .iter()
            .zip(&fitted.values)
            .zip(&grad)
        {
            assert_relative_eq!(*o, t - gamma * g, epsilon = 1e-12);
        }
    }

    #[test]
    fn newton_equals_one_fixed_point_iterate_of_the_deletion_objective() {
        // The one-step fixed-point iterate of the unlearn objective at
        // lambda = 0 and penalty p is
        // theta_hat - (1/(p N)) F^{-1} grad log p(C|theta_hat),
        // which is the deletion step at gamma = 1/(p N).
        let (spec, data, fitted, post) = trained_setup(3);
        let causes = Dataset::new(data.examples()[..6].to_vec(), 2).unwrap();
        let penalty = 0.7;
        let gamma = 1.0 / (penalty * post.n_train as f64);
        let newton = newton_removal(&post, &spec, &causes, gamma, &FisherSolver::Diag).unwrap();
        let grad = dataset_grad_log_likelihood(&spec, &fitted.values, &causes).unwrap();
        for (i, ((o, t), g)) in newton
            .theta_repaired
            .values
            .iter()
            .zip(&fitted.values)
            .zip(&grad)
            .enumerate()
        {
            let iterate = t
                - g / (penalty * post.n_train as f64 * (post.fisher_diag[i] + post.damping));
            assert_relative_eq!(*o, iterate, epsilon = 1e-10);
        }
    }

    #[test]
    fn deletion_decreases_cause_log_likelihood() {
        // Protocol-shaped run: asymmetric label noise causes failures, the
        // flipped points are unlearned, early stopping watches accuracy on
        // a slice of the failure query set.
        let clean = two_blob_dataset(100, 2.0, 0.6, 31);
        let cm = ConfusionMatrix {
            num_classes: 2,
            rows: vec![vec![0.6, 0.4], vec![0.0, 1.0]],
        };
        let (noisy, truth) = flip_labels(&clean, &cm, 7).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let fitted = train(
            &spec,
            &spec.init_params(3),
            &noisy,
            &OptimizerConfig {
                learning_rate: 0.02,
                max_epochs: 50,
                ..Default::default()
            },
        )
        .unwrap();
        let test = two_blob_dataset(400, 2.0, 0.6, 87);
        let (f_q, _, _) = split_failures(&spec, &fitted, &test, 0.5, 9).unwrap();
        let fisher = empirical_fisher_diag(&spec, &fitted.values, &noisy).unwrap();
        let post = PosteriorApprox::new(fitted.clone(), fisher, noisy.len(), 1e-4).unwrap();
        let causes = noisy.keep_ids(&truth.corrupted_ids);
        let cfg = EwcConfig {
            lambda_prior: 0.0,
            penalty_scale: EwcConfig::penalty_scale_for_gamma(0.05, post.n_train),
            opt: OptimizerConfig {
                learning_rate: 0.01,
                max_epochs: 300,
                patience: 25,
                ..Default::default()
            },
            sign: AdaptSign::Unlearn,
            validation: None,
        };
        let out = ewc_deletion(&post, &spec, &causes, &cfg, &f_q).unwrap();
        let before = dataset_log_likelihood(&spec, &fitted.values, &causes).unwrap();
        let after =
            dataset_log_likelihood(&spec, &out.theta_repaired.values, &causes).unwrap();
        assert!(after < before, "cause log-lik before {before}, after {after}");
        // The treatment also helps the failures it was validated on.
        let fq_before = accuracy(&spec, &fitted.values, &f_q).unwrap().unwrap();
        let fq_after = accuracy(&spec, &out.theta_repaired.values, &f_q)
            .unwrap()
            .unwrap();
        assert!(fq_after > fq_before, "query accuracy {fq_before} -> {fq_after}");
    }

    #[test]
    fn conjugate_deletion_recovers_exact_mean_via_treatment_api() {
        let ys: Vec<f64> = vec![1.2, -0.3, 0.8, 2.1, 0.4, -0.9, 1.5, 0.1, 0.6, 1.9];
        let targets: HashMap<u64, f64> =
            ys.iter().enumerate().map(|(i, &y)| (i as u64, y)).collect();
        let model = GaussianLinearModel::new(1, 1.0, targets);
        let examples: Vec<Example> = ys
            .iter()
            .enumerate()
            .map(|(i, _)| Example::new(vec![1.0], 0, i as u64))
            .collect();
        let data = Dataset::new(examples, 1).unwrap();
        let n = ys.len();
        let theta_hat = ys.iter().sum::<f64>() / n as f64;
        let anchor = ParameterVector::new(
            vec![theta_hat],
            vec![LayoutEntry {
                name: "w".into(),
                shape: vec![1],
            }],
        )
        .unwrap();
        let post = PosteriorApprox::new(anchor, vec![1.0], n, 0.0).unwrap();
        let cause_ids: BTreeSet<u64> = [0u64, 3, 7].into_iter().collect();
        let causes = data.keep_ids(&cause_ids);
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
                seed: 9,
            },
            sign: AdaptSign::Unlearn,
            validation: None,
        };
        // Validation on the retained examples: their mean log-likelihood is
        // maximal exactly at the deleted-posterior mean, so the stopping
        // metric tracks the target.
        let retained = data.remove_ids(&cause_ids);
        let out = ewc_deletion(&post, &model, &causes, &cfg, &retained).unwrap();
        assert!(
            (out.theta_repaired.values[0] - exact).abs() < 1e-6,
            "unlearned {} vs exact {}",
            out.theta_repaired.values[0],
            exact
        );
    }

    #[test]
    fn removing_flipped_labels_repairs_the_separable_instance() {
        // Constructed instance where label noise is the sole failure cause:
        // removing every flipped point and fine-tuning restores holdout
        // accuracy.
        let clean = two_blob_dataset(120, 3.5, 0.45, 11);
        let cm = ConfusionMatrix::with_pairs(2, &[(0, 1)], 0.3).unwrap();
        let (noisy, truth) = flip_labels(&clean, &cm, 5).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let opt = OptimizerConfig {
            learning_rate: 0.02,
            max_epochs: 60,
            ..Default::default()
        };
        let fitted = train(&spec, &spec.init_params(2), &noisy, &opt).unwrap();
        let test = two_blob_dataset(600, 3.5, 0.45, 77);
        let (_, f_h, _) = split_failures(&spec, &fitted, &test, 0.5, 3).unwrap();
        let retained = noisy.remove_ids(&truth.corrupted_ids);
        let out = finetune_removal(&spec, &fitted, &retained, &opt).unwrap();
        let holdout_acc = accuracy(&spec, &out.theta_repaired.values, &f_h)
            .unwrap()
            .unwrap();
        assert!(holdout_acc >= 0.95, "holdout accuracy {holdout_acc}");
    }

    #[test]
    fn unconstrained_failure_finetune_overfits() {
        let clean = two_blob_dataset(100, 2.0, 0.9, 21);
        let spec = ModelSpec::logistic(2, 2);
        let opt = OptimizerConfig {
            learning_rate: 0.05,
            max_epochs: 40,
            ..Default::default()
        };
        let fitted = train(&spec, &spec.init_params(4), &clean, &opt).unwrap();
        let test = two_blob_dataset(500, 2.0, 0.9, 91);
        let (f_q, _, remaining) = split_failures(&spec, &fitted, &test, 0.7, 2).unwrap();
        let long_opt = OptimizerConfig {
            learning_rate: 0.05,
            max_epochs: 800,
            patience: 800,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let out = finetune_failures(&spec, &fitted, &f_q, 0.0, &long_opt).unwrap();
        let fq_acc = accuracy(&spec, &out.theta_repaired.values, &f_q)
            .unwrap()
            .unwrap();
        let rem_before = accuracy(&spec, &fitted.values, &remaining).unwrap().unwrap();
        let rem_after = accuracy(&spec, &out.theta_repaired.values, &remaining)
            .unwrap()
            .unwrap();
        assert!(fq_acc >= 0.9, "query accuracy {fq_acc}");
        assert!(
            rem_after < rem_before,
            "remaining accuracy did not degrade: {rem_before} -> {rem_after}"
        );
    }
}
