//! Command-line front end: one subcommand per pipeline stage, plus the full
//! pipeline and the oracle verification suite.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error,
//! 3 data error, 4 numeric failure, 5 fingerprint mismatch.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use repair_core::CoreError;

const RECIPES: &[(&str, &str)] = &[
    (
        "synthetic-labelnoise",
        include_str!("../recipes/synthetic-labelnoise.toml"),
    ),
    (
        "mnist3000-labelnoise",
        include_str!("../recipes/mnist3000-labelnoise.toml"),
    ),
    (
        "digits-labelnoise",
        include_str!("../recipes/digits-labelnoise.toml"),
    ),
    (
        "mnist-saltpepper",
        include_str!("../recipes/mnist-saltpepper.toml"),
    ),
    ("mnist-fgsm", include_str!("../recipes/mnist-fgsm.toml")),
];

#[derive(Parser)]
#[command(
    name = "repair",
    version,
    about = "Repair a trained classifier: identify the training examples behind a set of test failures, then erase their influence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file path, or the name of a bundled recipe.
    #[arg(long, global = true)]
    config: Option<String>,

    /// Overrides the training shuffle and initialisation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for parallel reductions (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the data and plant the configured corruption.
    Corrupt,
    /// Train the base model and its posterior approximation.
    Train,
    /// Split failures and score every training example against the query set.
    Identify,
    /// Select causes and run the configured treatment.
    Treat,
    /// Evaluate checkpoints on the failure and remaining splits.
    Evaluate,
    /// Run the whole pipeline end to end.
    Repair,
    /// Run the oracle suite: gradient checks, Fisher identities, quadrature
    /// agreement, rank fidelity, conjugate exactness.
    Verify,
    /// List the bundled recipe configs (use --config <name> to run one).
    Recipes {
        /// Print the named recipe instead of listing.
        name: Option<String>,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Stage { source, .. } => exit_code_for(source),
        CoreError::InvalidConfig { .. }
        | CoreError::DimensionMismatch { .. }
        | CoreError::Unsupported { .. }
        | CoreError::Json(_) => 2,
        CoreError::Io(_)
        | CoreError::BadMagic { .. }
        | CoreError::Truncated { .. }
        | CoreError::CountMismatch { .. }
        | CoreError::Container { .. }
        | CoreError::EmptyData { .. } => 3,
        CoreError::NonFinite { .. }
        | CoreError::Divergence { .. }
        | CoreError::SolverStalled { .. }
        | CoreError::SolverDiverged { .. }
        | CoreError::ZeroFisherEntry { .. }
        | CoreError::InsufficientCoverage { .. }
        | CoreError::AdditivityViolation { .. }
        | CoreError::NothingToRepair => 4,
        CoreError::FingerprintMismatch { .. } => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match &cli.command {
        Command::Recipes { name } => {
            match name {
                Some(name) => match RECIPES.iter().find(|(n, _)| n == name) {
                    Some((_, body)) => println!("{body}"),
                    None => {
                        eprintln!("error: no bundled recipe named {name}");
                        return ExitCode::from(2);
                    }
                },
                None => {
                    for (name, _) in RECIPES {
                        println!("{name}");
                    }
                }
            }
            return ExitCode::SUCCESS;
        }
        Command::Verify => {
            return match repair_core::verify::run_all() {
                Ok(checks) => {
                    print!("{}", repair_core::verify::render_table(&checks));
                    if checks.iter().all(|c| c.passed) {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: verification suite aborted: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            };
        }
        Command::Corrupt => stages::cmd_corrupt(&cli),
        Command::Train => stages::cmd_train(&cli),
        Command::Identify => stages::cmd_identify(&cli),
        Command::Treat => stages::cmd_treat(&cli),
        Command::Evaluate => stages::cmd_evaluate(&cli),
        Command::Repair => stages::cmd_repair(&cli),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}
