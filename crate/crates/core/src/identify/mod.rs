//! Cause identification: per-example influence scores of the training data
//! against a failure query set, cause selection policies, detection curves,
//! and exact quadrature oracles for the log-density ratio at tiny scale.
//!
//! Both scoring methods share the one-pass shape: a single posterior update
//! (one Fisher solve for the linear score, one adaptation run for the
//! penalised score), then one cheap pass over all training examples.

mod quadrature;

pub use quadrature::{
    exact_log_ratio, exact_log_ratio_predictive, exact_taylor_ratio, posterior_mode,
    GaussianPrior, QuadratureConfig, QuadratureOracle,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::dataset_fingerprint;
use crate::datasets::CorruptionReport;
use crate::diffmodels::{dataset_grad_log_likelihood, Dataset, Model};
use crate::error::{CoreError, Result};
use crate::posterior::{ewc_adapt, AdaptSign, EwcConfig, FisherSolver, PosteriorApprox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceMethod {
    LinearCg,
    LinearSa,
    LinearDiag,
    Ewc,
}

/// Per-example influence scores with their provenance and the derived
/// ranking (descending score, ties broken by ascending id).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub scores: BTreeMap<u64, f64>,
    pub method: InfluenceMethod,
    pub query_fingerprint: String,
    pub hyperparams: serde_json::Value,
    pub ranking: Vec<u64>,
}

impl InfluenceReport {
    pub fn new(
        scores: BTreeMap<u64, f64>,
        method: InfluenceMethod,
        query_fingerprint: String,
        hyperparams: serde_json::Value,
    ) -> Result<Self> {
        if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("influence score {s} for example {id}"),
            });
        }
        let mut ranking: Vec<u64> = scores.keys().copied().collect();
        ranking.sort_by(|a, b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite scores")
                .then(a.cmp(b))
        });
        Ok(InfluenceReport {
            scores,
            method,
            query_fingerprint,
            hyperparams,
            ranking,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// CSV export: `id,score,rank[,corrupted]`, RFC 4180 line endings.
    pub fn write_csv(&self, path: &Path, truth: Option<&BTreeSet<u64>>) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(path)
            .map_err(csv_err)?;
        let mut header = vec!["id", "score", "rank"];
        if truth.is_some() {
            header.push("corrupted");
        }
        w.write_record(&header).map_err(csv_err)?;
        for (rank, id) in self.ranking.iter().enumerate() {
            let mut record = vec![
                id.to_string(),
                format!("{:.17e}", self.scores[id]),
                (rank + 1).to_string(),
            ];
            if let Some(truth) = truth {
                record.push((truth.contains(id) as u8).to_string());
            }
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON sidecar with the method, hyperparameters, and fingerprints.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let sidecar = serde_json::json!({
            "method": self.method,
            "hyperparams": self.hyperparams,
            "query_fingerprint": self.query_fingerprint,
            "num_scored": self.scores.len(),
        });
        std::fs::write(path, serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Container {
        message: format!("csv: {e}"),
    }
}

/// Reads the id/score columns back out of an influence CSV. Scores are
/// printed with 17 significant digits, so the round trip is exact.
pub fn read_scores_csv(path: &Path) -> Result<BTreeMap<u64, f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut scores = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let id: u64 = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::Container {
                message: format!("{}: bad id field", path.display()),
            })?;
        let score: f64 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::Container {
                message: format!("{}: bad score field", path.display()),
            })?;
        scores.insert(id, score);
    }
    Ok(scores)
}

const SCORE_CHUNK: usize = 64;

/// Linear influence: one Fisher solve
/// `u = (F + damping I)^{-1} grad log p(F_q | theta_hat)`, then
/// `score(z) = -gamma * u . grad log p(z | theta_hat)` for every training
/// example.
pub fn linear_influence(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    train: &Dataset,
    f_q: &Dataset,
    gamma: f64,
    solver: &FisherSolver,
) -> Result<InfluenceReport> {
    if f_q.is_empty() {
        return Err(CoreError::EmptyData {
            context: "linear_influence query set".into(),
        });
    }
    let params = &posterior.theta_hat.values;
    let grad_f = dataset_grad_log_likelihood(model, params, f_q)?;
    let u = solver.solve(posterior, &grad_f)?;

    let scores = score_all(train, |z| {
        let g = model.grad_log_likelihood(params, z)?;
        Ok(-gamma * u.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>())
    })?;

    let method = match solver {
        FisherSolver::Cg { .. } => InfluenceMethod::LinearCg,
        FisherSolver::Sa { .. } => InfluenceMethod::LinearSa,
        FisherSolver::Diag => InfluenceMethod::LinearDiag,
    };
    InfluenceReport::new(
        scores,
        method,
        dataset_fingerprint(f_q),
        serde_json::json!({
            "gamma": gamma,
            "solver": solver.name(),
            "damping": posterior.damping,
        }),
    )
}

/// Penalised-adaptation influence: one adaptation run on the query set,
/// then `score(z) = log p(z | theta_hat) - log p(z | theta_adapted)` for
/// every training example.
pub fn ewc_influence(
    posterior: &PosteriorApprox,
    model: &dyn Model,
    train: &Dataset,
    f_q: &Dataset,
    cfg: &EwcConfig,
) -> Result<InfluenceReport> {
    if f_q.is_empty() {
        return Err(CoreError::EmptyData {
            context: "ewc_influence query set".into(),
        });
    }
    if cfg.sign != AdaptSign::Learn {
        return Err(CoreError::invalid_config(
            "ewc_influence requires sign = learn",
        ));
    }
    let adapted = ewc_adapt(posterior, model, f_q, cfg)?;
    let before = &posterior.theta_hat.values;
    let after = &adapted.values;
    let scores = score_all(train, |z| {
        Ok(model.log_likelihood(before, z)? - model.log_likelihood(after, z)?)
    })?;
    InfluenceReport::new(
        scores,
        InfluenceMethod::Ewc,
        dataset_fingerprint(f_q),
        serde_json::json!({
            "penalty_scale": cfg.penalty_scale,
            "lambda_prior": cfg.lambda_prior,
            "learning_rate": cfg.opt.learning_rate,
            "max_epochs": cfg.opt.max_epochs,
            "patience": cfg.opt.patience,
            "seed": cfg.opt.seed,
        }),
    )
}

/// Scores every example in parallel; completion order is irrelevant because
/// results key by id.
fn score_all(
    train: &Dataset,
    score: impl Fn(&crate::diffmodels::Example) -> Result<f64> + Sync,
) -> Result<BTreeMap<u64, f64>> {
    let chunks: Vec<Vec<(u64, f64)>> = train
        .examples()
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|z| Ok((z.id, score(z)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// How to turn a ranking into a cause set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// Every example with a strictly positive score.
    Positive,
    /// The first `k` of the ranking.
    TopK { k: usize },
    /// The first `ceil(fraction * n)` of the ranking.
    TopFraction { fraction: f64 },
}

pub fn select_causes(report: &InfluenceReport, policy: SelectionPolicy) -> Result<BTreeSet<u64>> {
    match policy {
        SelectionPolicy::Positive => Ok(report
            .scores
            .iter()
            .filter(|(_, &s)| s > 0.0)
            .map(|(&id, _)| id)
            .collect()),
        SelectionPolicy::TopK { k } => {
            if k > report.ranking.len() {
                return Err(CoreError::invalid_config(format!(
                    "top_k of {k} from {} scored examples",
                    report.ranking.len()
                )));
            }
            Ok(report.ranking[..k].iter().copied().collect())
        }
        SelectionPolicy::TopFraction { fraction } => {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(CoreError::invalid_config("fraction must lie in [0, 1]"));
            }
            let k = ((fraction * report.ranking.len() as f64).ceil() as usize)
                .min(report.ranking.len());
            Ok(report.ranking[..k].iter().copied().collect())
        }
    }
}

/// Walks the ranking and emits, at every inspected count, the cumulative
/// fraction of the ground-truth corrupted examples found so far.
pub fn detection_curve(
    report: &InfluenceReport,
    truth: &CorruptionReport,
) -> Result<Vec<(usize, f64)>> {
    if truth.corrupted_ids.is_empty() {
        return Err(CoreError::EmptyData {
            context: "detection_curve ground truth".into(),
        });
    }
    if let Some(id) = truth
        .corrupted_ids
        .iter()
        .find(|id| !report.scores.contains_key(id))
    {
        return Err(CoreError::invalid_config(format!(
            "corrupted id {id} was never scored"
        )));
    }
    let total = truth.corrupted_ids.len() as f64;
    let mut found = 0usize;
    let mut curve = Vec::with_capacity(report.ranking.len());
    for (i, id) in report.ranking.iter().enumerate() {
        if truth.corrupted_ids.contains(id) {
            found += 1;
        }
        curve.push((i + 1, found as f64 / total));
    }
    Ok(curve)
}
