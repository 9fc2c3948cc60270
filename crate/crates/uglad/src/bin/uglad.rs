//! Thin command-line entry point; all behavior lives in `uglad::cli`.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use uglad::cli::commands::{
    cmd_compare, cmd_evaluate, cmd_export_graph, cmd_fit, cmd_simulate, CompareArgs,
    EvaluateArgs, ExportGraphArgs, FitArgs, SimulateArgs,
};
use uglad::cli::export::DEFAULT_EDGE_THRESHOLD;
use uglad::fit::{FitConfig, FitMode};
use uglad::glad::UnrollConfig;

#[derive(Parser)]
#[command(
    name = "uglad",
    version,
    about = "Sparse precision-matrix recovery with an unrolled, unsupervised graphical-lasso network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark instance (data CSV + ground truth)
    Simulate(SimulateCli),
    /// Recover a precision matrix from a sample CSV
    Fit(FitCli),
    /// Score a recovered precision against a ground truth
    Evaluate(EvaluateCli),
    /// Run a benchmark scenario over methods and sample sizes
    Compare(CompareCli),
    /// Export a precision matrix as a DOT graph of partial correlations
    ExportGraph(ExportGraphCli),
}

#[derive(Args)]
struct SimulateCli {
    /// Number of features
    #[arg(long, short = 'd')]
    dim: usize,
    /// Edge probability of the random support
    #[arg(long, default_value_t = 0.1)]
    edge_prob: f64,
    /// Number of samples
    #[arg(long, short = 'm')]
    samples: usize,
    /// Fraction of entries marked missing
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for data.csv, truth.json, manifest.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitCli {
    /// Sample CSV (directory of CSVs in multitask mode)
    #[arg(long)]
    input: PathBuf,
    /// Training mode
    #[arg(long, value_enum, default_value = "cv")]
    mode: ModeArg,
    #[arg(long, default_value_t = uglad::fit::DEFAULT_EPOCHS)]
    epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = uglad::fit::DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Accept a learning rate outside the supported range
    #[arg(long, default_value_t = false)]
    allow_lr_override: bool,
    /// Unroll depth of the network
    #[arg(long, default_value_t = 30)]
    unroll: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_init: f64,
    /// Held-out fraction in cv mode
    #[arg(long, default_value_t = 0.3)]
    holdout: f64,
    /// Batch count in missing mode
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multitask variant scoring against in-task held-out covariances
    #[arg(long, default_value_t = false)]
    multitask_split: bool,
    /// Output precision JSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Direct,
    Cv,
    Multitask,
    Missing,
}

impl From<ModeArg> for FitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Direct => FitMode::Direct,
            ModeArg::Cv => FitMode::Cv,
            ModeArg::Multitask => FitMode::Multitask,
            ModeArg::Missing => FitMode::Missing,
        }
    }
}

#[derive(Args)]
struct EvaluateCli {
    /// Precision JSON produced by `fit`
    #[arg(long)]
    precision: PathBuf,
    /// Ground-truth JSON produced by `simulate`
    #[arg(long)]
    truth: PathBuf,
    /// Output metrics JSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareCli {
    /// Scenario file (key = value lines)
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for results.csv and manifest.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportGraphCli {
    /// Precision JSON produced by `fit`
    #[arg(long)]
    precision: PathBuf,
    /// Threshold on |partial correlation|
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    threshold: f64,
    /// Output DOT path
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(&SimulateArgs {
            dim: a.dim,
            edge_prob: a.edge_prob,
            samples: a.samples,
            dropout: a.dropout,
            seed: a.seed,
            out_dir: a.out,
        }),
        Command::Fit(a) => {
            let config = FitConfig {
                mode: a.mode.into(),
                epochs: a.epochs,
                learning_rate: a.lr,
                allow_lr_outside_range: a.allow_lr_override,
                unroll: UnrollConfig {
                    steps: a.unroll,
                    lambda_init: a.lambda_init,
                },
                cv_holdout: a.holdout,
                folds: a.folds,
                seed: a.seed,
                multitask_split: a.multitask_split,
            };
            cmd_fit(&FitArgs {
                input: a.input,
                config,
                out: a.out,
            })
            .map(|_| ())
        }
        Command::Evaluate(a) => cmd_evaluate(&EvaluateArgs {
            precision: a.precision,
            truth: a.truth,
            out: a.out,
        })
        .map(|_| ()),
        Command::Compare(a) => cmd_compare(&CompareArgs {
            scenario: a.scenario,
            out_dir: a.out,
        })
        .map(|_| ()),
        Command::ExportGraph(a) => cmd_export_graph(&ExportGraphArgs {
            precision: a.precision,
            threshold: a.threshold,
            out: a.out,
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
