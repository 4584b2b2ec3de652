//! Stage implementations: each subcommand consumes and produces the
//! versioned containers, with fingerprint checks tying consecutive stages
//! together.

use std::path::{Path, PathBuf};

use repair_core::container::{
    dataset_fingerprint, id_set_fingerprint, load_dataset, save_dataset, Checkpoint,
};
use repair_core::datasets::{center_dataset, split_failures};
use repair_core::diffmodels::{accuracy, Dataset};
use repair_core::error::{CoreError, Result};
use repair_core::identify::{read_scores_csv, InfluenceMethod, InfluenceReport, SelectionPolicy};
use repair_core::posterior::PosteriorApprox;
use repair_core::repair::{evaluate, run_repair, IdentifyMethodConfig, RepairConfig, SelectConfig};

use crate::Cli;

/// Expands `${VAR}` references against the environment.
fn expand_env(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| {
            CoreError::invalid_config("unterminated ${...} reference in config")
        })?;
        let var = &after[..end];
        let value = std::env::var(var).map_err(|_| {
            CoreError::invalid_config(format!(
                "config references ${{{var}}} but the environment variable is unset"
            ))
        })?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn load_config(cli: &Cli) -> Result<RepairConfig> {
    let reference = cli
        .config
        .as_deref()
        .ok_or_else(|| CoreError::invalid_config("--config is required for this command"))?;
    let text = match crate::RECIPES.iter().find(|(n, _)| *n == reference) {
        Some((_, body)) => body.to_string(),
        None => std::fs::read_to_string(reference).map_err(|e| {
            CoreError::invalid_config(format!("cannot read config {reference}: {e}"))
        })?,
    };
    let text = expand_env(&text)?;
    let mut config: RepairConfig = toml::from_str(&text)
        .map_err(|e| CoreError::invalid_config(format!("config parse error: {e}")))?;
    if let Some(seed) = cli.seed {
        config.train.opt.seed = seed;
        config.train.init_seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.output.dir = Some(dir.clone());
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &RepairConfig) -> Result<PathBuf> {
    config
        .output
        .dir
        .clone()
        .ok_or_else(|| CoreError::invalid_config("no output directory (set [output] dir or --out-dir)"))
}

struct Paths {
    train_corrupted: PathBuf,
    test: PathBuf,
    checkpoint: PathBuf,
    failures_query: PathBuf,
    failures_holdout: PathBuf,
    remaining: PathBuf,
    influence_csv: PathBuf,
    influence_json: PathBuf,
    causes: PathBuf,
    repaired: PathBuf,
    eval: PathBuf,
}

impl Paths {
    fn new(dir: &Path) -> Self {
        Paths {
            train_corrupted: dir.join("train_corrupted.bin"),
            test: dir.join("test.bin"),
            checkpoint: dir.join("checkpoint.bin"),
            failures_query: dir.join("failures_query.bin"),
            failures_holdout: dir.join("failures_holdout.bin"),
            remaining: dir.join("remaining.bin"),
            influence_csv: dir.join("influence.csv"),
            influence_json: dir.join("influence.json"),
            causes: dir.join("causes.json"),
            repaired: dir.join("repaired.bin"),
            eval: dir.join("eval.json"),
        }
    }
}

fn say(cli: &Cli, message: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", message.as_ref());
    }
}

/// Runs the data and corruption stages, persisting the corrupted training
/// set (with its report) and the raw test set.
pub fn cmd_corrupt(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let dir = out_dir(&config)?;
    std::fs::create_dir_all(&dir)?;
    let paths = Paths::new(&dir);

    // Reuse the pipeline's data and corrupt stages without training: build
    // them through the same code path for bit-identical artifacts.
    let (train_corrupted, report, test) =
        repair_core::repair::prepare_data_only(&config)?;
    save_dataset(&train_corrupted, report.as_ref(), &paths.train_corrupted)?;
    save_dataset(&test, None, &paths.test)?;
    say(
        cli,
        format!(
            "corrupted {} of {} training examples -> {}",
            report.as_ref().map_or(0, |r| r.corrupted_ids.len()),
            train_corrupted.len(),
            paths.train_corrupted.display()
        ),
    );
    Ok(())
}

fn load_stage_data(config: &RepairConfig, paths: &Paths) -> Result<(Dataset, Dataset)> {
    if paths.train_corrupted.exists() && paths.test.exists() {
        let (train, _) = load_dataset(&paths.train_corrupted)?;
        let (test, _) = load_dataset(&paths.test)?;
        Ok((train, test))
    } else {
        let (train, _, test) = repair_core::repair::prepare_data_only(config)?;
        Ok((train, test))
    }
}

/// Trains the base model, fits the posterior approximation, and writes the
/// checkpoint with its manifest.
pub fn cmd_train(cli: &Cli) -> Result<()> {
    use repair_core::diffmodels::train_detailed;
    use repair_core::posterior::empirical_fisher_diag;

    let config = load_config(cli)?;
    let dir = out_dir(&config)?;
    std::fs::create_dir_all(&dir)?;
    let paths = Paths::new(&dir);
    let spec = config.model.to_spec()?;
    let (train_raw, _test_raw) = load_stage_data(&config, &paths)?;
    if !paths.train_corrupted.exists() {
        // Persist what we trained on so later stages can fingerprint it.
        let (train_c, report, test) = repair_core::repair::prepare_data_only(&config)?;
        save_dataset(&train_c, report.as_ref(), &paths.train_corrupted)?;
        save_dataset(&test, None, &paths.test)?;
    }

    let (train_data, center_mean) = if config.train.center_inputs {
        let mean = repair_core::datasets::mean_image(&train_raw)?;
        (center_dataset(&train_raw, &mean)?, Some(mean))
    } else {
        (train_raw.clone(), None)
    };

    let init = spec.init_params(config.train.init_seed);
    let outcome = train_detailed(&spec, &init, &train_data, &config.train.opt)?;
    let fisher = empirical_fisher_diag(&spec, &outcome.params.values, &train_data)?;
    let posterior = PosteriorApprox::new(
        outcome.params.clone(),
        fisher,
        train_data.len(),
        config.train.damping,
    )?;

    // Reconstruct the trainer's fit/validation slices to report both.
    let (fit_acc, val_acc) = {
        let (fit_idx, val_idx) =
            repair_core::diffmodels::validation_split(train_data.len(), &config.train.opt);
        let subset = |idx: &[usize]| -> Result<Dataset> {
            Dataset::new(
                idx.iter()
                    .map(|&i| train_data.examples()[i].clone())
                    .collect(),
                train_data.num_classes(),
            )
        };
        let fit = subset(&fit_idx)?;
        let val = subset(&val_idx)?;
        (
            accuracy(&spec, &outcome.params.values, &fit)?,
            accuracy(&spec, &outcome.params.values, &val)?,
        )
    };

    let manifest = serde_json::json!({
        "config_hash": config.hash()?,
        "dataset_fingerprint": dataset_fingerprint(&train_raw),
        "train_seed": config.train.opt.seed,
        "init_seed": config.train.init_seed,
        "damping": config.train.damping,
        "center_mean": center_mean,
        "epochs_run": outcome.epochs_run,
        "early_stopped": outcome.early_stopped,
    });
    Checkpoint {
        spec,
        params: outcome.params,
        posterior: Some(posterior),
        manifest,
    }
    .save(&paths.checkpoint)?;
    let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    say(
        cli,
        format!(
            "trained {} epochs; train accuracy {}, validation accuracy {} -> {}",
            outcome.epochs_run,
            fmt(fit_acc),
            fmt(val_acc),
            paths.checkpoint.display()
        ),
    );
    Ok(())
}

fn check_fingerprints(config: &RepairConfig, ckpt: &Checkpoint, train_raw: &Dataset) -> Result<()> {
    let expected = config.hash()?;
    let got = ckpt.manifest["config_hash"].as_str().unwrap_or("missing");
    if got != expected {
        return Err(CoreError::FingerprintMismatch {
            expected,
            got: got.to_string(),
        });
    }
    let expected = dataset_fingerprint(train_raw);
    let got = ckpt.manifest["dataset_fingerprint"]
        .as_str()
        .unwrap_or("missing");
    if got != expected {
        return Err(CoreError::FingerprintMismatch {
            expected,
            got: got.to_string(),
        });
    }
    Ok(())
}

fn centered_views(ckpt: &Checkpoint, train_raw: &Dataset, test_raw: &Dataset) -> Result<(Dataset, Dataset)> {
    match ckpt.manifest["center_mean"].as_array() {
        Some(values) => {
            let mean: Vec<f64> = values.iter().filter_map(|v| v.as_f64()).collect();
            Ok((
                center_dataset(train_raw, &mean)?,
                center_dataset(test_raw, &mean)?,
            ))
        }
        None => Ok((train_raw.clone(), test_raw.clone())),
    }
}

/// Splits the failures and writes an influence report over the training set.
pub fn cmd_identify(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let dir = out_dir(&config)?;
    let paths = Paths::new(&dir);
    let (train_raw, _) = load_dataset(&paths.train_corrupted)?;
    let (test_raw, _) = load_dataset(&paths.test)?;
    let ckpt = Checkpoint::load(&paths.checkpoint)?;
    check_fingerprints(&config, &ckpt, &train_raw)?;
    let (train_data, test_data) = centered_views(&ckpt, &train_raw, &test_raw)?;

    let posterior = ckpt.posterior.clone().ok_or_else(|| CoreError::Container {
        message: format!("{} holds no posterior sections", paths.checkpoint.display()),
    })?;

    let eval_test =
        repair_core::repair::filtered_eval_test(&config, &ckpt.spec, &ckpt.params, &test_data)?;
    let (f_q, f_h, remaining) = split_failures(
        &ckpt.spec,
        &ckpt.params,
        &eval_test,
        config.identify.query_fraction,
        config.identify.split_seed,
    )?;
    save_dataset(&f_q, None, &paths.failures_query)?;
    save_dataset(&f_h, None, &paths.failures_holdout)?;
    save_dataset(&remaining, None, &paths.remaining)?;

    let report = repair_core::repair::identify_on(
        &config,
        &ckpt.spec,
        &posterior,
        &train_data,
        &f_q,
    )?;
    let (_, truth) = load_dataset(&paths.train_corrupted)?;
    report.write_csv(
        &paths.influence_csv,
        truth.as_ref().map(|t| &t.corrupted_ids),
    )?;
    report.write_sidecar(&paths.influence_json)?;
    say(
        cli,
        format!(
            "scored {} training examples against {} query failures -> {}",
            report.len(),
            f_q.len(),
            paths.influence_csv.display()
        ),
    );
    Ok(())
}

/// Selects causes per the configured policy and runs the treatment.
pub fn cmd_treat(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let dir = out_dir(&config)?;
    let paths = Paths::new(&dir);
    let (train_raw, _) = load_dataset(&paths.train_corrupted)?;
    let (test_raw, _) = load_dataset(&paths.test)?;
    let ckpt = Checkpoint::load(&paths.checkpoint)?;
    check_fingerprints(&config, &ckpt, &train_raw)?;
    let (train_data, _) = centered_views(&ckpt, &train_raw, &test_raw)?;
    let posterior = ckpt.posterior.clone().ok_or_else(|| CoreError::Container {
        message: format!("{} holds no posterior sections", paths.checkpoint.display()),
    })?;

    let scores = read_scores_csv(&paths.influence_csv)?;
    let method = match config.identify.method {
        IdentifyMethodConfig::Ewc => InfluenceMethod::Ewc,
        IdentifyMethodConfig::LinearCg => InfluenceMethod::LinearCg,
        IdentifyMethodConfig::LinearSa => InfluenceMethod::LinearSa,
        IdentifyMethodConfig::LinearDiag => InfluenceMethod::LinearDiag,
    };
    let report = InfluenceReport::new(
        scores,
        method,
        "loaded-from-csv".into(),
        serde_json::json!({}),
    )?;
    let policy = match config.select {
        SelectConfig::Positive => SelectionPolicy::Positive,
        SelectConfig::TopK { k } => SelectionPolicy::TopK { k },
        SelectConfig::TopFraction { fraction } => SelectionPolicy::TopFraction { fraction },
    };
    let causes = repair_core::identify::select_causes(&report, policy)?;
    std::fs::write(
        &paths.causes,
        serde_json::to_vec_pretty(&serde_json::json!({
            "ids": causes,
            "fingerprint": id_set_fingerprint(&causes),
        }))?,
    )?;

    let (f_q, _) = load_dataset(&paths.failures_query)?;
    let outcome = repair_core::repair::treat_on(
        &config,
        &ckpt.spec,
        &posterior,
        &ckpt.params,
        &train_data,
        &f_q,
        &causes,
    )?;
    Checkpoint {
        spec: ckpt.spec.clone(),
        params: outcome.theta_repaired.clone(),
        posterior: None,
        manifest: serde_json::json!({
            "method": format!("{:?}", outcome.method),
            "hyperparams": outcome.hyperparams,
            "cause_fingerprint": id_set_fingerprint(&causes),
            "steps_taken": outcome.steps_taken,
            "early_stop_reason": outcome.early_stop_reason,
        }),
    }
    .save(&paths.repaired)?;
    say(
        cli,
        format!(
            "treated with {:?} on {} causes -> {}",
            outcome.method,
            causes.len(),
            paths.repaired.display()
        ),
    );
    Ok(())
}

/// Evaluates the base and repaired checkpoints on the persisted splits.
pub fn cmd_evaluate(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let dir = out_dir(&config)?;
    let paths = Paths::new(&dir);
    let ckpt = Checkpoint::load(&paths.checkpoint)?;
    let repaired = Checkpoint::load(&paths.repaired)?;
    let (f_q, _) = load_dataset(&paths.failures_query)?;
    let (f_h, _) = load_dataset(&paths.failures_holdout)?;
    let (remaining, _) = load_dataset(&paths.remaining)?;

    let before = evaluate(&ckpt.spec, &ckpt.params, &f_q, &f_h, &remaining)?;
    let after = evaluate(&ckpt.spec, &repaired.params, &f_q, &f_h, &remaining)?;
    let body = serde_json::json!({ "before": before, "after": after });
    std::fs::write(&paths.eval, serde_json::to_vec_pretty(&body)?)?;
    say(cli, format!("{}", serde_json::to_string_pretty(&body)?));
    Ok(())
}

/// Runs the full pipeline.
pub fn cmd_repair(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let report = run_repair(&config)?;
    let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    say(
        cli,
        format!(
            "repair complete: query {} -> {}, holdout {} -> {}, remaining {} -> {} ({} causes)",
            fmt(report.acc_before.query),
            fmt(report.acc_after.query),
            fmt(report.acc_before.holdout),
            fmt(report.acc_after.holdout),
            fmt(report.acc_before.remaining),
            fmt(report.acc_after.remaining),
            report.counts.n_causes,
        ),
    );
    if let Some(dir) = &config.output.dir {
        say(cli, format!("artifacts in {}", dir.display()));
    }
    Ok(())
}
