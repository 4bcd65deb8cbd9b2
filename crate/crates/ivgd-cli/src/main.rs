//! Command-line driver for the source-localization pipeline.
//!
//! Every subcommand reads one experiment config (`--config`), runs its
//! stage (reusing up-to-date artifacts from earlier stages), prints the
//! artifact path it produced, and exits 0. Config problems exit 2;
//! numeric breakdowns and refused inversions exit 3; everything else
//! exits 1.

use clap::{Parser, Subcommand};
use ivgd::experiment::{self, AblationVariant, ExperimentConfig};
use ivgd::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ivgd", version, about = "Diffusion-source localization experiments")]
struct Cli {
    /// Experiment config file (flat key=value with [sections]).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the cascade seed from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate cascades and write the dataset.
    Generate,
    /// Train the forward diffusion model on the train split.
    TrainForward,
    /// Estimate Lipschitz certificates for the trained model.
    Certify,
    /// Fixed-point inversion diagnostics over the test split.
    Invert,
    /// Train the localization head on inverted train samples.
    TrainLocalizer,
    /// Run trained inference over the test split, writing traces.
    Localize {
        /// Enforce sum(x) = N during inference.
        #[arg(long, value_name = "N")]
        known_source_count: Option<usize>,
    },
    /// Classical baselines over the test split.
    Baseline {
        #[command(subcommand)]
        method: BaselineMethod,
    },
    /// Test metrics for the trained model and the LPSI baseline.
    Evaluate,
    /// Retrain with parts removed and write their metrics.
    Ablate {
        /// Variants to run: no_inversion, no_compensation, no_validity
        /// (default: all three).
        variants: Vec<String>,
    },
    /// Run every stage in order, or a single one with --stage.
    Pipeline {
        /// One stage name instead of the full run.
        #[arg(long, value_name = "NAME")]
        stage: Option<String>,
    },
}

#[derive(Subcommand)]
enum BaselineMethod {
    /// Label-propagation source identification.
    Lpsi,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse { .. } | Error::Validation(_) => 2,
        Error::Numeric(_) | Error::Invertibility(_) => 3,
        _ => 1,
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::validation("--config PATH is required"))?;
    let mut cfg = experiment::load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Runs one stage, reporting its artifact on success and its name on
/// failure (the error itself is printed by main).
fn run_stage(name: &str, f: impl FnOnce() -> Result<PathBuf>) -> Result<()> {
    match f() {
        Ok(path) => {
            println!("{}: {}", name, path.display());
            Ok(())
        }
        Err(err) => {
            eprintln!("stage {} failed", name);
            Err(err)
        }
    }
}

const STAGE_NAMES: &str =
    "generate, train-forward, certify, invert, train-localizer, localize, baseline, evaluate";

fn dispatch_stage(cfg: &ExperimentConfig, name: &str) -> Result<()> {
    match name {
        "generate" => run_stage(name, || experiment::stage_generate(cfg)),
        "train-forward" => run_stage(name, || experiment::stage_train_forward(cfg)),
        "certify" => run_stage(name, || experiment::stage_certify(cfg)),
        "invert" => run_stage(name, || experiment::stage_invert(cfg)),
        "train-localizer" => run_stage(name, || experiment::stage_train_localizer(cfg)),
        "localize" => run_stage(name, || experiment::stage_localize(cfg, None)),
        "baseline" | "lpsi" => {
            run_stage("baseline lpsi", || experiment::stage_baseline_lpsi(cfg))
        }
        "evaluate" => run_stage(name, || experiment::stage_evaluate(cfg)),
        other => Err(Error::validation(format!(
            "unknown stage {:?} (expected one of: {})",
            other, STAGE_NAMES
        ))),
    }
}

fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<()> {
    for name in [
        "generate",
        "train-forward",
        "certify",
        "train-localizer",
        "localize",
        "baseline",
        "evaluate",
    ] {
        dispatch_stage(cfg, name)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Generate => dispatch_stage(&cfg, "generate"),
        Command::TrainForward => dispatch_stage(&cfg, "train-forward"),
        Command::Certify => dispatch_stage(&cfg, "certify"),
        Command::Invert => dispatch_stage(&cfg, "invert"),
        Command::TrainLocalizer => dispatch_stage(&cfg, "train-localizer"),
        Command::Localize { known_source_count } => {
            let count = *known_source_count;
            run_stage("localize", || experiment::stage_localize(&cfg, count))
        }
        Command::Baseline { method: BaselineMethod::Lpsi } => dispatch_stage(&cfg, "baseline"),
        Command::Evaluate => dispatch_stage(&cfg, "evaluate"),
        Command::Ablate { variants } => {
            let parsed: Vec<AblationVariant> = if variants.is_empty() {
                AblationVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
            };
            run_stage("ablate", || experiment::run_ablation(&cfg, &parsed))
        }
        Command::Pipeline { stage } => match stage {
            Some(name) => dispatch_stage(&cfg, name),
            None => run_full_pipeline(&cfg),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code(&err))
        }
    }
}
