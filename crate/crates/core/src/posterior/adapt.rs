//! Anchored adaptation: seeded mini-batch ascent on
//! `s * log p(data_term | theta) - penalty_scale * (N/2) (theta - theta_hat)^T diag(F) (theta - theta_hat)
//!  - (lambda/2) ||theta - theta_hat||^2`
//! with `s = +1` to learn the data term and `s = -1` to unlearn it.
//!
//! Epochs that fail to improve the full deterministic objective are rolled
//! back and halve the learning rate, so the accepted trajectory is monotone
//! and terminal precision is limited by float arithmetic rather than step
//! size. Early stopping follows the configured patience on the validation
//! metric: held-out log-likelihood for learn runs, validation-set accuracy
//! for unlearn runs that carry one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instrument;
use super::PosteriorApprox;
use crate::diffmodels::{accuracy, Adam, Dataset, Example, Model, OptimizerConfig, ParameterVector};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptSign {
    Learn,
    Unlearn,
}

impl AdaptSign {
    fn factor(self) -> f64 {
        match self {
            AdaptSign::Learn => 1.0,
            AdaptSign::Unlearn => -1.0,
        }
    }
}

/// Settings for one adaptation run.
#[derive(Debug, Clone)]
pub struct EwcConfig {
    /// Prior precision `lambda` on the isotropic anchor term.
    pub lambda_prior: f64,
    /// Multiplier on the Fisher quadratic; sweeping `2 / (gamma N)` trades
    /// adaptation strength against anchoring.
    pub penalty_scale: f64,
    pub opt: OptimizerConfig,
    pub sign: AdaptSign,
    /// Early-stopping set for unlearn runs (a slice of the failure query
    /// set); learn runs hold out a slice of the data term instead.
    pub validation: Option<Dataset>,
}

impl EwcConfig {
    pub fn learn(penalty_scale: f64, opt: OptimizerConfig) -> Self {
        EwcConfig {
            lambda_prior: 0.0,
            penalty_scale,
            opt,
            sign: AdaptSign::Learn,
            validation: None,
        }
    }

    pub fn unlearn(penalty_scale: f64, opt: OptimizerConfig, validation: Option<Dataset>) -> Self {
        EwcConfig {
            lambda_prior: 0.0,
            penalty_scale,
            opt,
            sign: AdaptSign::Unlearn,
            validation,
        }
    }

    /// The reweighting `2 / (gamma N)` of the Fisher quadratic.
    pub fn penalty_scale_for_gamma(gamma: f64, n_train: usize) -> f64 {
        2.0 / (gamma * n_train as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.opt.validate()?;
        if self.penalty_scale <= 0.0 || !self.penalty_scale.is_finite() {
            return Err(CoreError::invalid_config("penalty_scale must be positive"));
        }
        if self.lambda_prior < 0.0 || !self.lambda_prior.is_finite() {
            return Err(CoreError::invalid_config("lambda_prior must be non-negative"));
        }
        Ok(())
    }
}

/// Result of an adaptation run with its acceptance history.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: ParameterVector,
    pub epochs_run: usize,
    /// Objective values of the accepted epochs, starting from the anchor.
    pub objective_trace: Vec<f64>,
    pub early_stop_reason: String,
}

struct Objective<'a> {
    model: &'a dyn Model,
    sign: f64,
    penalty_scale: f64,
    lambda: f64,
    n_train: f64,
    fisher_diag: &'a [f64],
    anchor: &'a [f64],
}

impl Objective<'_> {
    fn quad(&self, theta: &[f64]) -> f64 {
        let mut fisher_term = 0.0;
        let mut l2 = 0.0;
        for ((&t, &a), &f) in theta.iter().zip(self.anchor).zip(self.fisher_diag) {
            let d = t - a;
            fisher_term += f * d * d;
            l2 += d * d;
        }
        -self.penalty_scale * 0.5 * self.n_train * fisher_term - 0.5 * self.lambda * l2
    }

    fn value(&self, theta: &[f64], fit: &[Example]) -> Result<f64> {
        let mut loglik = 0.0;
        for z in fit {
            loglik += self.model.log_likelihood(theta, z)?;
        }
        Ok(self.sign * loglik + self.quad(theta))
    }

    /// Gradient of the full objective estimated from a mini-batch: the
    /// likelihood part is scaled up to the fit-set size, the quadratic part
    /// is exact.
    fn batch_grad(&self, theta: &[f64], batch: &[&Example], n_fit: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; theta.len()];
        for z in batch {
            let g = self.model.grad_log_likelihood(theta, z)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let lik_scale = self.sign * n_fit as f64 / batch.len() as f64;
        for (i, g) in grad.iter_mut().enumerate() {
            let d = theta[i] - self.anchor[i];
            *g = lik_scale * *g
                - self.penalty_scale * self.n_train * self.fisher_diag[i] * d
                - self.lambda * d;
        }
        Ok(grad)
    }
}

enum StopMetric<'a> {
    /// Mean held-out log-likelihood (learn runs).
    ValLogLik(Vec<Example>),
    /// Accuracy on the supplied validation set (unlearn runs); models
    /// without class probabilities fall back to mean log-likelihood there.
    ValAccuracy(&'a Dataset),
    /// The objective itself, when no validation data exists.
    Objective,
}

/// Runs the adaptation and returns the parameters with the best stopping
/// metric. See the module docs for the objective and acceptance rule.
pub fn ewc_adapt_detailed(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    data_term: &Dataset,
    cfg: &EwcConfig,
) -> Result<AdaptOutcome> {
    instrument::note_ewc_adapt();
    cfg.validate()?;
    if data_term.is_empty() {
        return Err(CoreError::EmptyData {
            context: "ewc_adapt".into(),
        });
    }
    if posterior.dim() != model.param_count() {
        return Err(CoreError::DimensionMismatch {
            axis: "params".into(),
            expected: model.param_count(),
            got: posterior.dim(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.opt.seed);

    // Fit/validation split. Learn runs hold out the tail of a seeded
    // shuffle of the data term; unlearn runs fit on all of it.
    let (fit, metric): (Vec<Example>, StopMetric) = match cfg.sign {
        AdaptSign::Learn => {
            let mut order: Vec<usize> = (0..data_term.len()).collect();
            order.shuffle(&mut rng);
            let n_val = ((data_term.len() as f64) * cfg.opt.validation_fraction).floor() as usize;
            let (fit_idx, val_idx) = order.split_at(data_term.len() - n_val);
            let fit: Vec<Example> = fit_idx
                .iter()
                .map(|&i| data_term.examples()[i].clone())
                .collect();
            let val: Vec<Example> = val_idx
                .iter()
                .map(|&i| data_term.examples()[i].clone())
                .collect();
            let metric = if val.is_empty() {
                StopMetric::Objective
            } else {
                StopMetric::ValLogLik(val)
            };
            (fit, metric)
        }
        AdaptSign::Unlearn => {
            let metric = match &cfg.validation {
                Some(v) if !v.is_empty() => StopMetric::ValAccuracy(v),
                _ => StopMetric::Objective,
            };
            (data_term.examples().to_vec(), metric)
        }
    };
    if fit.is_empty() {
        return Err(CoreError::EmptyData {
            context: "ewc_adapt fit slice (validation fraction too large)".into(),
        });
    }

    let objective = Objective {
        model,
        sign: cfg.sign.factor(),
        penalty_scale: cfg.penalty_scale,
        lambda: cfg.lambda_prior,
        n_train: posterior.n_train as f64,
        fisher_diag: &posterior.fisher_diag,
        anchor: &posterior.theta_hat.values,
    };

    let mean_loglik = |theta: &[f64], val: &[Example]| -> Result<f64> {
        let mut total = 0.0;
        for z in val {
            total += model.log_likelihood(theta, z)?;
        }
        Ok(total / val.len() as f64)
    };
    let eval_metric = |theta: &[f64], obj: f64| -> Result<f64> {
        match &metric {
            StopMetric::Objective => Ok(obj),
            StopMetric::ValLogLik(val) => mean_loglik(theta, val),
            StopMetric::ValAccuracy(val) => match accuracy(model, theta, val) {
                Ok(acc) => Ok(acc.unwrap_or(0.0)),
                Err(CoreError::Unsupported { .. }) => mean_loglik(theta, val.examples()),
                Err(e) => Err(e),
            },
        }
    };

    let anchor = &posterior.theta_hat.values;
    let mut theta = anchor.clone();
    let mut accepted = anchor.clone();
    let mut obj_accepted = objective.value(&theta, &fit)?;
    if !obj_accepted.is_finite() {
        return Err(CoreError::Divergence {
            context: "ewc_adapt (initial objective non-finite)".into(),
            epoch: 0,
            step: 0,
        });
    }
    let mut trace = vec![obj_accepted];

    let mut best = accepted.clone();
    let mut best_metric = eval_metric(&accepted, obj_accepted)?;
    let mut adam = Adam::new(theta.len());
    let mut lr = cfg.opt.learning_rate;
    let mut bad_epochs = 0usize;
    let mut first_disp: Option<f64> = None;
    let mut epochs_run = 0usize;
    let mut early_stop = "max-epochs".to_string();

    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 0..cfg.opt.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for (step, batch_idx) in order.chunks(cfg.opt.batch_size).enumerate() {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &fit[i]).collect();
            let grad = objective.batch_grad(&theta, &batch, fit.len())?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(divergence_error(epoch, step, &trace));
            }
            // Ascent: Adam minimises, so feed the negated gradient.
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            adam.step(&mut theta, &neg, lr);
        }

        let obj_new = objective.value(&theta, &fit)?;
        if !obj_new.is_finite() {
            return Err(divergence_error(epoch, 0, &trace));
        }

        if obj_new > obj_accepted {
            let disp = theta
                .iter()
                .zip(anchor)
                .map(|(t, a)| (t - a) * (t - a))
                .sum::<f64>()
                .sqrt();
            // Trust region for unlearn: the likelihood term pushes away from
            // the anchor without bound when the quadratic is weak; cap the
            // displacement at 10x the first accepted epoch's.
            if cfg.sign == AdaptSign::Unlearn {
                if let Some(d1) = first_disp {
                    if disp > 10.0 * d1 {
                        theta.copy_from_slice(&accepted);
                        early_stop = "trust-region".into();
                        break;
                    }
                } else {
                    first_disp = Some(disp);
                }
            }
            accepted.copy_from_slice(&theta);
            obj_accepted = obj_new;
            trace.push(obj_new);
        } else {
            theta.copy_from_slice(&accepted);
            adam.reset();
            lr *= 0.5;
            if lr < 1e-13 {
                early_stop = "step-floor".into();
                break;
            }
        }

        let m = eval_metric(&accepted, obj_accepted)?;
        if m > best_metric {
            best_metric = m;
            best.copy_from_slice(&accepted);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.opt.patience {
                early_stop = "patience".into();
                break;
            }
        }
    }

    Ok(AdaptOutcome {
        params: ParameterVector {
            values: best,
            layout: posterior.theta_hat.layout.clone(),
        },
        epochs_run,
        objective_trace: trace,
        early_stop_reason: early_stop,
    })
}

fn divergence_error(epoch: usize, step: usize, trace: &[f64]) -> CoreError {
    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(6)
        .rev()
        .map(|v| format!("{v:.6e}"))
        .collect();
    CoreError::Divergence {
        context: format!("ewc_adapt (objective trace ... {})", tail.join(", ")),
        epoch,
        step,
    }
}

/// Adaptation returning just the parameters.
pub fn ewc_adapt(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    data_term: &Dataset,
    cfg: &EwcConfig,
) -> Result<ParameterVector> {
    Ok(ewc_adapt_detailed(posterior, model, data_term, cfg)?.params)
}

/// Distance of `theta_star` from the one-step fixed-point map
/// `theta_hat + s * N^{-1} F^{-1} grad log p(data_term | theta_star)`
/// under the damped diagonal Fisher. A small residual certifies that the
/// adaptation converged to the lambda = 0 optimum with unit penalty scale.
pub fn fixed_point_check(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    data_term: &Dataset,
    theta_star: &ParameterVector,
    sign: AdaptSign,
) -> Result<f64> {
    if theta_star.values.len() != posterior.dim() {
        return Err(CoreError::DimensionMismatch {
            axis: "theta_star".into(),
            expected: posterior.dim(),
            got: theta_star.values.len(),
        });
    }
    let grad = crate::diffmodels::dataset_grad_log_likelihood(model, &theta_star.values, data_term)?;
    let n = posterior.n_train as f64;
    let s = sign.factor();
    let mut sq = 0.0;
    for (i, ((&t, &a), (&g, &f))) in theta_star
        .values
        .iter()
        .zip(&posterior.theta_hat.values)
        .zip(grad.iter().zip(&posterior.fisher_diag))
        .enumerate()
    {
        let denom = f + posterior.damping;
        if denom == 0.0 {
            return Err(CoreError::ZeroFisherEntry { index: i });
        }
        let target = a + s * g / (n * denom);
        sq += (t - target) * (t - target);
    }
    Ok(sq.sqrt())
}
