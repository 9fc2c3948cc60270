//! The five subcommands behind the `uglad` binary. Each command writes its
//! outputs plus a manifest and returns the data it produced so callers and
//! tests can inspect it directly.

use super::compare::{render_csv, render_pretty, run_scenario_with_threads, CompareReport};
use super::export::render_dot;
use super::io::{
    read_csv, read_json, read_truth, write_csv, write_json, write_metrics, PrecisionDoc,
};
use super::manifest::ManifestBuilder;
use super::scenario::parse_scenario_file;
use super::CliError;
use crate::data::Dataset;
use crate::fit::{fit_cv, fit_direct, fit_missing, fit_multitask, FitConfig, FitMode, FitResult};
use crate::metrics::{aupr_auc, MetricReport};
use crate::synth::{generate_precision, sample_mvn};
use serde_json::json;
use std::path::{Path, PathBuf};

/// Manifest sibling of an output file: `result.json` -> `result.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

pub struct SimulateArgs {
    pub dim: usize,
    pub edge_prob: f64,
    pub samples: usize,
    pub dropout: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Writes `data.csv`, `truth.json` and `manifest.json` under the output
/// directory. Identical seeds produce byte-identical data and truth files.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.dim < 2 {
        return Err(CliError::InvalidArgument("--dim must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&args.edge_prob) {
        return Err(CliError::InvalidArgument(
            "--edge-prob must be in [0, 1]".into(),
        ));
    }
    if args.samples < 1 {
        return Err(CliError::InvalidArgument(
            "--samples must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&args.dropout) {
        return Err(CliError::InvalidArgument(
            "--dropout must be in [0, 1)".into(),
        ));
    }
    let config = json!({
        "dim": args.dim,
        "edge_prob": args.edge_prob,
        "samples": args.samples,
        "dropout": args.dropout,
    });
    let mut manifest = ManifestBuilder::start("simulate", config.clone(), args.seed);
    manifest.input_bytes("params", config.to_string().as_bytes());

    let truth = generate_precision(args.dim, args.edge_prob, args.seed)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut x = sample_mvn(&truth, args.samples, args.seed);
    if args.dropout > 0.0 {
        x = crate::data::inject_dropout(&x, args.dropout, args.seed);
    }

    std::fs::create_dir_all(&args.out_dir)
        .map_err(CliError::io(args.out_dir.display().to_string()))?;
    write_csv(&args.out_dir.join("data.csv"), &x)?;
    write_json(
        &args.out_dir.join("truth.json"),
        &truth.to_doc(x.feature_names()),
    )?;
    write_json(&args.out_dir.join("manifest.json"), &manifest.finish())?;
    println!(
        "wrote {} samples x {} features to {}",
        args.samples,
        args.dim,
        args.out_dir.display()
    );
    Ok(())
}

pub struct FitArgs {
    /// CSV file, or a directory of CSV files in multitask mode.
    pub input: PathBuf,
    pub config: FitConfig,
    pub out: PathBuf,
}

/// Dispatches to the configured fit mode and writes the precision JSON plus
/// a manifest.
pub fn cmd_fit(args: &FitArgs) -> Result<FitResult, CliError> {
    let mut manifest = ManifestBuilder::start(
        "fit",
        serde_json::to_value(&args.config).expect("config serializes"),
        args.config.seed,
    );

    let (result, features) = match args.config.mode {
        FitMode::Multitask => {
            let datasets = read_csv_directory(&args.input, &mut manifest)?;
            let features = datasets[0].feature_names().to_vec();
            (fit_multitask(&datasets, &args.config)?, features)
        }
        mode => {
            manifest.input_file(&args.input)?;
            let x = read_csv(&args.input)?;
            let features = x.feature_names().to_vec();
            let result = match mode {
                FitMode::Direct => {
                    require_complete(&x, "direct")?;
                    fit_direct(&x, &args.config)?
                }
                FitMode::Cv => {
                    require_complete(&x, "cv")?;
                    fit_cv(&x, &args.config)?
                }
                FitMode::Missing => {
                    if !x.has_missing() {
                        eprintln!(
                            "warning: {} has no missing entries; consensus mode still applies",
                            args.input.display()
                        );
                    }
                    fit_missing(&x, &args.config)?
                }
                FitMode::Multitask => unreachable!(),
            };
            (result, features)
        }
    };

    write_json(&args.out, &PrecisionDoc::from_result(&result, &features))?;
    write_json(&manifest_path(&args.out), &manifest.finish())?;
    let last = result.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "mode={} epochs_run={} final_loss={last:.6}{}",
        result.mode,
        result.loss_history.len(),
        result
            .best_epoch
            .map(|e| format!(" best_epoch={e}"))
            .unwrap_or_default()
    );
    Ok(result)
}

fn require_complete(x: &Dataset, mode: &str) -> Result<(), CliError> {
    if x.has_missing() {
        return Err(CliError::Data(format!(
            "{} missing entries present; {mode} mode needs complete data \
             (use --mode missing, or impute first)",
            x.missing_total()
        )));
    }
    Ok(())
}

fn read_csv_directory(
    dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<Vec<Dataset>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(CliError::io(dir.display().to_string()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::InvalidArgument(format!(
            "multitask mode expects a directory of CSV files, none found in {}",
            dir.display()
        )));
    }
    let mut datasets = Vec::with_capacity(paths.len());
    for p in &paths {
        manifest.input_file(p)?;
        datasets.push(read_csv(p)?);
    }
    Ok(datasets)
}

pub struct EvaluateArgs {
    pub precision: PathBuf,
    pub truth: PathBuf,
    pub out: PathBuf,
}

/// Scores a recovered precision against a ground truth and writes the
/// metric report.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricReport, CliError> {
    let mut manifest = ManifestBuilder::start("evaluate", json!({}), 0);
    manifest.input_file(&args.precision)?;
    manifest.input_file(&args.truth)?;

    let doc: PrecisionDoc = read_json(&args.precision)?;
    let predicted = doc.single_precision()?;
    let truth = read_truth(&args.truth)?;
    let report = aupr_auc(&predicted, &truth)?;

    write_metrics(&args.out, &report)?;
    write_json(&manifest_path(&args.out), &manifest.finish())?;
    println!("aupr={:.3} auc={:.3}", report.aupr, report.auc);
    Ok(report)
}

pub struct CompareArgs {
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
}

/// Runs a benchmark scenario and writes `results.csv` next to a pretty
/// table on stdout. Worker count comes from `UGLAD_THREADS` (default: all
/// logical cores).
pub fn cmd_compare(args: &CompareArgs) -> Result<CompareReport, CliError> {
    let spec = parse_scenario_file(&args.scenario)?;
    let mut manifest = ManifestBuilder::start(
        "compare",
        json!({"scenario": args.scenario.display().to_string()}),
        spec.seed,
    );
    manifest.input_file(&args.scenario)?;

    let threads = match std::env::var(super::compare::THREADS_ENV_VAR) {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            CliError::InvalidArgument(format!(
                "{} must be a positive integer, got '{v}'",
                super::compare::THREADS_ENV_VAR
            ))
        })?),
        Err(_) => None,
    };
    let report = run_scenario_with_threads(&spec, threads)?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(CliError::io(args.out_dir.display().to_string()))?;
    let csv_path = args.out_dir.join("results.csv");
    std::fs::write(&csv_path, render_csv(&report))
        .map_err(CliError::io(csv_path.display().to_string()))?;
    write_json(&args.out_dir.join("manifest.json"), &manifest.finish())?;
    print!("{}", render_pretty(&report));
    Ok(report)
}

pub struct ExportGraphArgs {
    pub precision: PathBuf,
    pub threshold: f64,
    pub out: PathBuf,
}

/// Converts a precision JSON into a DOT graph of partial correlations.
pub fn cmd_export_graph(args: &ExportGraphArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::start(
        "export-graph",
        json!({"threshold": args.threshold}),
        0,
    );
    manifest.input_file(&args.precision)?;
    let doc: PrecisionDoc = read_json(&args.precision)?;
    let matrix = doc.single_precision()?;
    let dot = render_dot(&matrix, &doc.features, args.threshold)?;
    std::fs::write(&args.out, &dot).map_err(CliError::io(args.out.display().to_string()))?;
    write_json(&manifest_path(&args.out), &manifest.finish())?;
    println!("wrote {}", args.out.display());
    Ok(())
}
