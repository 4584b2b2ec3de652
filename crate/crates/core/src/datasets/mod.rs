//! Dataset ingestion, subsampling, and the corruption generators used to
//! plant ground-truth failure causes.
//!
//! Every generator is pure given its seed: per-example randomness comes from
//! a counter-based stream keyed by example id, so corruption is independent
//! of iteration order and safe to parallelise.

pub mod idx;
pub mod synth;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmodels::{argmax_class, input_grad, predict, Dataset, Example, ModelSpec, ParameterVector};
use crate::error::{CoreError, Result};

pub use idx::load_idx;

/// Row-stochastic label-noise matrix: row `c` is the distribution the new
/// label of a true-class-`c` example is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub rows: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn identity(num_classes: usize) -> Self {
        let rows = (0..num_classes)
            .map(|c| {
                let mut row = vec![0.0; num_classes];
                row[c] = 1.0;
                row
            })
            .collect();
        ConfusionMatrix { num_classes, rows }
    }

    /// Identity matrix with symmetric flips between each pair at `rate`.
    /// The default label-noise recipe pairs 1<->7 and 6<->9 at rate 0.3.
    pub fn with_pairs(num_classes: usize, pairs: &[(usize, usize)], rate: f64) -> Result<Self> {
        let mut cm = ConfusionMatrix::identity(num_classes);
        for &(a, b) in pairs {
            if a >= num_classes || b >= num_classes {
                return Err(CoreError::invalid_config(format!(
                    "confusion pair ({a}, {b}) out of range for {num_classes} classes"
                )));
            }
            cm.rows[a][a] = 1.0 - rate;
            cm.rows[a][b] = rate;
            cm.rows[b][b] = 1.0 - rate;
            cm.rows[b][a] = rate;
        }
        cm.validate()?;
        Ok(cm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.num_classes {
            return Err(CoreError::invalid_config(format!(
                "confusion matrix has {} rows for {} classes",
                self.rows.len(),
                self.num_classes
            )));
        }
        for (c, row) in self.rows.iter().enumerate() {
            if row.len() != self.num_classes {
                return Err(CoreError::invalid_config(format!(
                    "confusion row {c} has length {}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(CoreError::invalid_config(format!(
                    "confusion row {c} has negative or non-finite entries"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(CoreError::invalid_config(format!(
                    "confusion row {c} sums to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Parses a plain-text table: one row per line, whitespace-separated
    /// probabilities.
    pub fn parse_table(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            rows.push(row.map_err(|e| {
                CoreError::invalid_config(format!("bad confusion matrix entry: {e}"))
            })?);
        }
        let cm = ConfusionMatrix {
            num_classes: rows.len(),
            rows,
        };
        cm.validate()?;
        Ok(cm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    LabelFlip,
    SaltPepper,
    Gaussian,
    Fgsm,
}

/// Ground truth for detection metrics: which examples a generator touched
/// and with what settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub corrupted_ids: BTreeSet<u64>,
    pub kind: CorruptionKind,
    pub params: serde_json::Value,
}

/// Per-example random stream: keyed by (seed, id) so corruption of one
/// example is independent of every other.
fn example_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&id.to_le_bytes());
    key[16..24].copy_from_slice(&0x6372757074646174u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Seeded uniform subsample without replacement; original ids are preserved
/// and the surviving examples keep their file order.
pub fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(CoreError::invalid_config(format!(
            "subsample of {n} from {} examples",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, data.len(), n).into_vec();
    chosen.sort_unstable();
    let examples: Vec<Example> = chosen.iter().map(|&i| data.examples()[i].clone()).collect();
    let mask = data
        .corruption_mask()
        .map(|m| chosen.iter().map(|&i| m[i]).collect());
    data.replace_examples(examples, mask)
}

/// Draws each example's new label from the confusion row of its current
/// label. Inputs are untouched; the report lists exactly the examples whose
/// label changed.
pub fn flip_labels(
    data: &Dataset,
    cm: &ConfusionMatrix,
    seed: u64,
) -> Result<(Dataset, CorruptionReport)> {
    cm.validate()?;
    if cm.num_classes != data.num_classes() {
        return Err(CoreError::DimensionMismatch {
            axis: "num_classes".into(),
            expected: data.num_classes(),
            got: cm.num_classes,
        });
    }
    let mut examples = Vec::with_capacity(data.len());
    let mut changed = BTreeSet::new();
    for ex in data.examples() {
        let mut rng = example_rng(seed, ex.id);
        let u: f64 = rng.gen();
        let row = &cm.rows[ex.label];
        let mut acc = 0.0;
        let mut new_label = ex.label;
        for (c, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                new_label = c;
                break;
            }
        }
        if new_label != ex.label {
            changed.insert(ex.id);
        }
        examples.push(Example::new(ex.input.clone(), new_label, ex.id));
    }
    let mask: Vec<bool> = examples.iter().map(|ex| changed.contains(&ex.id)).collect();
    let corrupted = Dataset::new(examples, data.num_classes())?.with_mask(mask)?;
    let report = CorruptionReport {
        corrupted_ids: changed,
        kind: CorruptionKind::LabelFlip,
        params: serde_json::json!({ "seed": seed, "confusion_rows": cm.rows }),
    };
    Ok((corrupted, report))
}

fn check_target_classes(data: &Dataset, target_classes: &[usize]) -> Result<()> {
    for &c in target_classes {
        if c >= data.num_classes() {
            return Err(CoreError::invalid_config(format!(
                "target class {c} out of range for {} classes",
                data.num_classes()
            )));
        }
    }
    Ok(())
}

/// Seeded choice of `round(fraction * |candidates|)` examples among those
/// whose label lies in `target_classes`.
fn select_targets(
    data: &Dataset,
    target_classes: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<BTreeSet<u64>> {
    check_target_classes(data, target_classes)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CoreError::invalid_config("fraction must lie in [0, 1]"));
    }
    let candidates: Vec<u64> = data
        .examples()
        .iter()
        .filter(|ex| target_classes.contains(&ex.label))
        .map(|ex| ex.id)
        .collect();
    let n = ((candidates.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = candidates;
    ids.shuffle(&mut rng);
    ids.truncate(n);
    Ok(ids.into_iter().collect())
}

/// Replaces each pixel of the selected examples with probability
/// `pixel_rate` by one of the post-scaling extremes {0, 1} with equal odds.
/// Labels are untouched.
pub fn salt_pepper(
    data: &Dataset,
    target_classes: &[usize],
    fraction: f64,
    pixel_rate: f64,
    seed: u64,
) -> Result<(Dataset, CorruptionReport)> {
    if !(0.0..=1.0).contains(&pixel_rate) {
        return Err(CoreError::invalid_config("pixel_rate must lie in [0, 1]"));
    }
    let selected = select_targets(data, target_classes, fraction, seed)?;
    let mut examples = Vec::with_capacity(data.len());
    for ex in data.examples() {
        let mut input = ex.input.clone();
        if selected.contains(&ex.id) {
            let mut rng = example_rng(seed, ex.id);
            for px in input.iter_mut() {
                if rng.gen::<f64>() < pixel_rate {
                    *px = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        examples.push(Example::new(input, ex.label, ex.id));
    }
    let mask: Vec<bool> = examples.iter().map(|ex| selected.contains(&ex.id)).collect();
    let corrupted = Dataset::new(examples, data.num_classes())?.with_mask(mask)?;
    let report = CorruptionReport {
        corrupted_ids: selected,
        kind: CorruptionKind::SaltPepper,
        params: serde_json::json!({
            "seed": seed,
            "target_classes": target_classes,
            "fraction": fraction,
            "pixel_rate": pixel_rate,
        }),
    };
    Ok((corrupted, report))
}

/// Adds i.i.d. zero-mean Gaussian pixel noise to the selected examples,
/// clamped to [0, 1]. Labels are untouched.
pub fn gaussian_noise(
    data: &Dataset,
    target_classes: &[usize],
    fraction: f64,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, CorruptionReport)> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(CoreError::invalid_config("sigma must be positive"));
    }
    let selected = select_targets(data, target_classes, fraction, seed)?;
    let mut examples = Vec::with_capacity(data.len());
    for ex in data.examples() {
        let mut input = ex.input.clone();
        if selected.contains(&ex.id) {
            let mut rng = example_rng(seed, ex.id);
            for px in input.iter_mut() {
                *px = (*px + gaussian_sample(&mut rng) * sigma).clamp(0.0, 1.0);
            }
        }
        examples.push(Example::new(input, ex.label, ex.id));
    }
    let mask: Vec<bool> = examples.iter().map(|ex| selected.contains(&ex.id)).collect();
    let corrupted = Dataset::new(examples, data.num_classes())?.with_mask(mask)?;
    let report = CorruptionReport {
        corrupted_ids: selected,
        kind: CorruptionKind::Gaussian,
        params: serde_json::json!({
            "seed": seed,
            "target_classes": target_classes,
            "fraction": fraction,
            "sigma": sigma,
        }),
    };
    Ok((corrupted, report))
}

/// Standard normal via Box-Muller, consuming two uniforms per call so the
/// per-example stream stays reproducible.
pub(crate) fn gaussian_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast-gradient-sign poisoning: selected examples move one epsilon step
/// along the sign of the victim's input-loss gradient (clamped to [0, 1])
/// and take the victim's prediction on the perturbed input as their label.
pub fn fgsm_poison(
    victim_spec: &ModelSpec,
    victim_params: &ParameterVector,
    data: &Dataset,
    target_classes: &[usize],
    fraction: f64,
    epsilon: f64,
    seed: u64,
) -> Result<(Dataset, CorruptionReport)> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(CoreError::invalid_config("epsilon must be non-negative"));
    }
    let selected = select_targets(data, target_classes, fraction, seed)?;
    let mut examples = Vec::with_capacity(data.len());
    let mut max_prob_spread: f64 = 0.0;
    for ex in data.examples() {
        if selected.contains(&ex.id) {
            let gx = input_grad(victim_spec, victim_params, ex)?;
            let perturbed: Vec<f64> = ex
                .input
                .iter()
                .zip(&gx)
                .map(|(&x, &g)| (x + epsilon * sign(g)).clamp(0.0, 1.0))
                .collect();
            let probs = predict(victim_spec, victim_params, &perturbed)?;
            let spread = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - probs.iter().cloned().fold(f64::INFINITY, f64::min);
            max_prob_spread = max_prob_spread.max(spread);
            let label = argmax_class(&probs);
            examples.push(Example::new(perturbed, label, ex.id));
        } else {
            examples.push(ex.clone());
        }
    }
    let degenerate = !selected.is_empty() && max_prob_spread < 1e-9;
    let mask: Vec<bool> = examples.iter().map(|ex| selected.contains(&ex.id)).collect();
    let corrupted = Dataset::new(examples, data.num_classes())?.with_mask(mask)?;
    let mut params = serde_json::json!({
        "seed": seed,
        "target_classes": target_classes,
        "fraction": fraction,
        "epsilon": epsilon,
    });
    if degenerate {
        params["warning"] =
            serde_json::json!("victim model predicts uniformly; poison labels are arbitrary");
    }
    let report = CorruptionReport {
        corrupted_ids: selected,
        kind: CorruptionKind::Fgsm,
        params,
    };
    Ok((corrupted, report))
}

/// Per-pixel mean image of a dataset.
pub fn mean_image(data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(CoreError::EmptyData {
            context: "mean_image".into(),
        });
    }
    let dim = data.examples()[0].input.len();
    let mut mean = vec![0.0; dim];
    for ex in data.examples() {
        if ex.input.len() != dim {
            return Err(CoreError::DimensionMismatch {
                axis: "input".into(),
                expected: dim,
                got: ex.input.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(&ex.input) {
            *m += x;
        }
    }
    let scale = 1.0 / data.len() as f64;
    mean.iter_mut().for_each(|m| *m *= scale);
    Ok(mean)
}

/// Subtracts a fixed mean image from every input (the standard centring
/// preprocessing, applied after corruption). Labels, ids, and the
/// corruption mask are untouched.
pub fn center_dataset(data: &Dataset, mean: &[f64]) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(data.len());
    for ex in data.examples() {
        if ex.input.len() != mean.len() {
            return Err(CoreError::DimensionMismatch {
                axis: "input".into(),
                expected: mean.len(),
                got: ex.input.len(),
            });
        }
        examples.push(Example::new(
            ex.input.iter().zip(mean).map(|(x, m)| x - m).collect(),
            ex.label,
            ex.id,
        ));
    }
    data.replace_examples(examples, data.corruption_mask().map(|m| m.to_vec()))
}

/// Partitions a test set into failure query, failure holdout, and the
/// correctly-classified remainder.
pub fn split_failures(
    spec: &ModelSpec,
    params: &ParameterVector,
    test: &Dataset,
    query_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(0.0 < query_fraction && query_fraction < 1.0) {
        return Err(CoreError::invalid_config(
            "query_fraction must lie strictly between 0 and 1",
        ));
    }
    let mut failures = Vec::new();
    let mut remaining = Vec::new();
    for ex in test.examples() {
        let probs = predict(spec, params, &ex.input)?;
        if argmax_class(&probs) == ex.label {
            remaining.push(ex.clone());
        } else {
            failures.push(ex.clone());
        }
    }
    if failures.is_empty() {
        return Err(CoreError::NothingToRepair);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    failures.shuffle(&mut rng);
    let n_query = ((failures.len() as f64) * query_fraction).round() as usize;
    let holdout = failures.split_off(n_query.min(failures.len()));
    let k = test.num_classes();
    Ok((
        Dataset::new(failures, k)?,
        Dataset::new(holdout, k)?,
        Dataset::new(remaining, k)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth::two_blob_dataset;
    use crate::diffmodels::{train, OptimizerConfig};

    fn toy_images(n: usize, dim: usize, num_classes: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                Example::new(
                    (0..dim).map(|d| ((i + d) % 10) as f64 / 10.0).collect(),
                    i % num_classes,
                    i as u64,
                )
            })
            .collect();
        Dataset::new(examples, num_classes).unwrap()
    }

    #[test]
    fn subsample_is_deterministic_and_preserves_ids() {
        let data = toy_images(100, 4, 5);
        let a = subsample(&data, 30, 9).unwrap();
        let b = subsample(&data, 30, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let ids: BTreeSet<u64> = a.examples().iter().map(|e| e.id).collect();
        assert!(ids.iter().all(|&id| id < 100));
        assert!(subsample(&data, 101, 0).is_err());
        let full = subsample(&data, 100, 3).unwrap();
        assert_eq!(full.len(), 100);
    }

    #[test]
    fn subsample_overlap_tracks_hypergeometric_expectation() {
        let data = toy_images(200, 2, 2);
        // Two independent 80-subsets of 200: expected overlap 80*80/200 = 32.
        let mut overlaps = Vec::new();
        for trial in 0..20 {
            let a: BTreeSet<u64> = subsample(&data, 80, 1000 + trial)
                .unwrap()
                .examples()
                .iter()
                .map(|e| e.id)
                .collect();
            let b: BTreeSet<u64> = subsample(&data, 80, 5000 + trial)
                .unwrap()
                .examples()
                .iter()
                .map(|e| e.id)
                .collect();
            overlaps.push(a.intersection(&b).count() as f64);
        }
        let mean = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
        assert!((mean - 32.0).abs() < 5.0, "mean overlap {mean}");
    }

    #[test]
    fn identity_confusion_matrix_flips_nothing() {
        let data = toy_images(50, 3, 4);
        let cm = ConfusionMatrix::identity(4);
        let (flipped, report) = flip_labels(&data, &cm, 7).unwrap();
        assert!(report.corrupted_ids.is_empty());
        assert_eq!(flipped.examples(), data.examples());
    }

    #[test]
    fn symmetric_flip_rate_concentrates() {
        let data = toy_images(10000, 2, 2);
        let cm = ConfusionMatrix::with_pairs(2, &[(0, 1)], 0.3).unwrap();
        let (flipped, report) = flip_labels(&data, &cm, 3).unwrap();
        let rate = report.corrupted_ids.len() as f64 / 10000.0;
        assert!((rate - 0.3).abs() < 0.015, "flip rate {rate}");
        // Inputs untouched, and the report names exactly the changed labels.
        for (orig, new) in data.examples().iter().zip(flipped.examples()) {
            assert_eq!(orig.input, new.input);
            assert_eq!(
                orig.label != new.label,
                report.corrupted_ids.contains(&orig.id)
            );
        }
    }

    #[test]
    fn flip_labels_rejects_malformed_rows() {
        let data = toy_images(5, 2, 2);
        let cm = ConfusionMatrix {
            num_classes: 2,
            rows: vec![vec![0.6, 0.3], vec![0.5, 0.5]],
        };
        assert!(flip_labels(&data, &cm, 0).is_err());
    }

    #[test]
    fn salt_pepper_spikes_at_extremes() {
        let data = toy_images(200, 50, 4);
        let (noisy, report) = salt_pepper(&data, &[0, 1], 0.5, 0.4, 11).unwrap();
        assert!(!report.corrupted_ids.is_empty());
        let mut extremes = 0usize;
        let mut total = 0usize;
        for ex in noisy.examples() {
            if report.corrupted_ids.contains(&ex.id) {
                for (&px, &orig) in ex.input.iter().zip(
                    &data.examples()[ex.id as usize].input,
                ) {
                    total += 1;
                    if px != orig {
                        assert!(px == 0.0 || px == 1.0);
                        extremes += 1;
                    }
                }
            } else {
                assert_eq!(ex.input, data.examples()[ex.id as usize].input);
            }
        }
        let rate = extremes as f64 / total as f64;
        // Replacement hits pixel_rate of pixels, but a replacement can
        // coincide with the original value when it was already 0 or 1.
        assert!(rate > 0.25 && rate < 0.45, "extreme rate {rate}");
    }

    #[test]
    fn salt_pepper_zero_rate_changes_nothing_but_reports_selection() {
        let data = toy_images(40, 8, 4);
        let (noisy, report) = salt_pepper(&data, &[2], 1.0, 0.0, 5).unwrap();
        assert_eq!(noisy.examples(), data.examples());
        assert_eq!(report.corrupted_ids.len(), 10);
    }

    #[test]
    fn salt_pepper_share_of_whole_set() {
        // fraction 0.30 of 4 out of 10 balanced classes is ~12% of the set.
        let data = toy_images(5000, 4, 10);
        let (_, report) = salt_pepper(&data, &[1, 7, 6, 9], 0.30, 0.1, 2).unwrap();
        let share = report.corrupted_ids.len() as f64 / 5000.0;
        assert!((share - 0.12).abs() < 0.01, "share {share}");
    }

    #[test]
    fn gaussian_noise_matches_sigma() {
        // Mid-grey images keep the perturbation away from the clamp.
        let examples = (0..400)
            .map(|i| Example::new(vec![0.5; 30], 0, i as u64))
            .collect();
        let data = Dataset::new(examples, 2).unwrap();
        let sigma = 0.05;
        let (noisy, report) = gaussian_noise(&data, &[0], 1.0, sigma, 13).unwrap();
        let mut sq = 0.0;
        let mut count = 0usize;
        for ex in noisy.examples() {
            assert!(report.corrupted_ids.contains(&ex.id));
            for (&px, &orig) in ex.input.iter().zip(&data.examples()[ex.id as usize].input) {
                sq += (px - orig) * (px - orig);
                count += 1;
            }
        }
        let std = (sq / count as f64).sqrt();
        assert!((std - sigma).abs() / sigma < 0.05, "std {std}");
    }

    #[test]
    fn gaussian_noise_clamps_and_unknown_class_errors() {
        let data = toy_images(20, 5, 3);
        let (noisy, _) = gaussian_noise(&data, &[0], 1.0, 2.0, 1).unwrap();
        for ex in noisy.examples() {
            assert!(ex.input.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert!(gaussian_noise(&data, &[5], 1.0, 0.1, 1).is_err());
    }

    #[test]
    fn fgsm_zero_epsilon_relabels_without_perturbing() {
        // In-range inputs: at epsilon 0 the clamp must be a no-op.
        let raw = two_blob_dataset(100, 0.6, 0.1, 3);
        let shifted: Vec<Example> = raw
            .examples()
            .iter()
            .map(|e| {
                Example::new(
                    e.input.iter().map(|x| (x + 0.5).clamp(0.0, 1.0)).collect(),
                    e.label,
                    e.id,
                )
            })
            .collect();
        let train_data = Dataset::new(shifted, 2).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let victim = train(
            &spec,
            &spec.init_params(1),
            &train_data,
            &OptimizerConfig {
                learning_rate: 0.05,
                max_epochs: 60,
                ..Default::default()
            },
        )
        .unwrap();
        let (poisoned, report) =
            fgsm_poison(&spec, &victim, &train_data, &[0, 1], 0.5, 0.0, 7).unwrap();
        for ex in poisoned.examples() {
            let orig = &train_data.examples()[ex.id as usize];
            assert_eq!(ex.input, orig.input);
            if report.corrupted_ids.contains(&ex.id) {
                let probs = predict(&spec, &victim, &ex.input).unwrap();
                assert_eq!(ex.label, argmax_class(&probs));
            } else {
                assert_eq!(ex.label, orig.label);
            }
        }
    }

    #[test]
    fn fgsm_perturbation_hurts_the_victim() {
        // Clamping to [0,1] would nullify the attack on blob data centred
        // away from the unit box, so shift the blobs inside it.
        let raw = two_blob_dataset(200, 0.5, 0.12, 5);
        let shifted: Vec<Example> = raw
            .examples()
            .iter()
            .map(|e| {
                Example::new(
                    e.input.iter().map(|x| (x + 0.5).clamp(0.0, 1.0)).collect(),
                    e.label,
                    e.id,
                )
            })
            .collect();
        let data = Dataset::new(shifted, 2).unwrap();
        let spec = ModelSpec::logistic(2, 2);
        let victim = train(
            &spec,
            &spec.init_params(2),
            &data,
            &OptimizerConfig {
                learning_rate: 0.05,
                max_epochs: 80,
                ..Default::default()
            },
        )
        .unwrap();
        let (poisoned, report) =
            fgsm_poison(&spec, &victim, &data, &[0, 1], 1.0, 0.25, 9).unwrap();
        assert_eq!(report.corrupted_ids.len(), 200);
        // Accuracy of the victim against the ORIGINAL labels drops on the
        // perturbed inputs.
        let mut clean_ok = 0;
        let mut pois_ok = 0;
        for (orig, pert) in data.examples().iter().zip(poisoned.examples()) {
            let p_clean = predict(&spec, &victim, &orig.input).unwrap();
            let p_pois = predict(&spec, &victim, &pert.input).unwrap();
            if argmax_class(&p_clean) == orig.label {
                clean_ok += 1;
            }
            if argmax_class(&p_pois) == orig.label {
                pois_ok += 1;
            }
        }
        assert!(
            pois_ok < clean_ok,
            "poisoned correct {pois_ok} vs clean correct {clean_ok}"
        );
    }

    #[test]
    fn split_failures_partitions_the_test_set() {
        let test = two_blob_dataset(300, 1.0, 1.2, 21);
        let spec = ModelSpec::logistic(2, 2);
        let fitted = train(
            &spec,
            &spec.init_params(4),
            &test,
            &OptimizerConfig {
                max_epochs: 30,
                ..Default::default()
            },
        )
        .unwrap();
        let (fq, fh, rest) = split_failures(&spec, &fitted, &test, 0.5, 17).unwrap();
        assert_eq!(fq.len() + fh.len() + rest.len(), test.len());
        let mut all: Vec<u64> = fq
            .examples()
            .iter()
            .chain(fh.examples())
            .chain(rest.examples())
            .map(|e| e.id)
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), test.len());
        assert!((fq.len() as i64 - fh.len() as i64).abs() <= 1);
    }

    #[test]
    fn split_failures_errors_on_perfect_model() {
        let test = two_blob_dataset(100, 6.0, 0.3, 23);
        let spec = ModelSpec::logistic(2, 2);
        let fitted = train(
            &spec,
            &spec.init_params(5),
            &test,
            &OptimizerConfig {
                learning_rate: 0.1,
                max_epochs: 120,
                patience: 30,
                ..Default::default()
            },
        )
        .unwrap();
        match split_failures(&spec, &fitted, &test, 0.5, 1) {
            Err(CoreError::NothingToRepair) => {}
            other => panic!("expected NothingToRepair, got {other:?}"),
        }
    }
}
