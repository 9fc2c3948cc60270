//! Benchmark grid runner: for every (method, sample-size/dropout) cell the
//! scenario describes, generate seeded ground truths and samples, run the
//! method, score the recovered edges against the truth, and aggregate
//! mean/std per cell. Methods inside one replicate share the same data and
//! the same fit seed, so comparisons are paired.

use super::scenario::{Method, ScenarioSpec};
use super::CliError;
use crate::baseline::{baseline_cv, default_rho_grid};
use crate::data::{covariance, mean_impute, Dataset};
use crate::fit::{fit_cv, fit_direct, fit_missing, fit_multitask, FitConfig, FitMode};
use crate::metrics::aupr_auc;
use crate::rng;
use crate::synth::{generate_precision, sample_mvn, GroundTruth};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

pub const BASELINE_GRID_POINTS: usize = 8;
pub const BASELINE_FOLDS: usize = 5;
/// Environment variable limiting the comparison worker pool.
pub const THREADS_ENV_VAR: &str = "UGLAD_THREADS";

#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub m: usize,
    pub dropout: f64,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct CellStats {
    pub method: Method,
    pub column: usize,
    pub aupr_mean: f64,
    pub aupr_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub columns: Vec<ColumnSpec>,
    pub methods: Vec<Method>,
    pub cells: Vec<CellStats>,
}

impl CompareReport {
    pub fn cell(&self, method: Method, column: usize) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.column == column)
    }
}

fn columns_of(spec: &ScenarioSpec) -> Vec<ColumnSpec> {
    let mut cols = Vec::new();
    let m_only = spec.dropout_list.len() == 1 && spec.dropout_list[0] == 0.0;
    let dp_only = spec.m_list.len() == 1 && !m_only;
    for &m in &spec.m_list {
        for &dp in &spec.dropout_list {
            let label = if m_only {
                format!("M={m}")
            } else if dp_only {
                format!("dp={dp}")
            } else {
                format!("M={m},dp={dp}")
            };
            cols.push(ColumnSpec { m, dropout: dp, label });
        }
    }
    cols
}

/// One replicate's data for one column: tasks (one for single-task
/// scenarios) with ground truth, possibly-masked samples.
struct ReplicateData {
    tasks: Vec<(GroundTruth, Dataset)>,
    fit_seed: u64,
}

fn build_replicate(
    spec: &ScenarioSpec,
    col: &ColumnSpec,
    col_idx: usize,
    r: usize,
) -> Result<ReplicateData, CliError> {
    let k = spec.tasks;
    let mut tasks = Vec::with_capacity(k);
    let mut p_stream = rng::substream(spec.seed, "task-sparsity", r as u64);
    for task in 0..k {
        let p = if k == 1 {
            spec.p
        } else {
            p_stream.gen_range(spec.p_range.0..=spec.p_range.1)
        };
        let graph_seed = rng_index(r, task, 0);
        let truth = generate_precision(spec.d, p, derived(spec.seed, "graph", graph_seed))
            .map_err(|e| CliError::Numerical(format!("graph generation: {e}")))?;
        let sample_seed = derived(spec.seed, "sample", rng_index(r, task, col_idx + 1));
        let x = sample_mvn(&truth, col.m, sample_seed);
        let x = if col.dropout > 0.0 {
            let mask_seed = derived(spec.seed, "dropout-mask", rng_index(r, task, col_idx + 1));
            crate::data::inject_dropout(&x, col.dropout, mask_seed)
        } else {
            x
        };
        tasks.push((truth, x));
    }
    Ok(ReplicateData {
        tasks,
        fit_seed: derived(spec.seed, "fit", r as u64),
    })
}

fn rng_index(r: usize, task: usize, col: usize) -> u64 {
    (r as u64) * 1_000_000 + (task as u64) * 1_000 + col as u64
}

fn derived(seed: u64, label: &str, index: u64) -> u64 {
    use rand_chacha::rand_core::RngCore;
    rng::substream(seed, label, index).next_u64()
}

fn fit_config(mode: FitMode, seed: u64) -> FitConfig {
    FitConfig {
        mode,
        seed,
        ..FitConfig::default()
    }
}

/// Complete view of a possibly-masked dataset: the mean-imputation pipeline
/// applied when dropout produced missing entries.
fn completed(x: &Dataset) -> Result<Dataset, CliError> {
    if x.has_missing() {
        Ok(mean_impute(x)?)
    } else {
        Ok(x.clone())
    }
}

fn run_method_on_replicate(
    method: Method,
    data: &ReplicateData,
) -> Result<Vec<(f64, f64)>, CliError> {
    let mut out = Vec::with_capacity(data.tasks.len());
    match method {
        Method::UgladMultitask => {
            let xs: Vec<Dataset> = data
                .tasks
                .iter()
                .map(|(_, x)| completed(x))
                .collect::<Result<_, _>>()?;
            let cfg = fit_config(FitMode::Multitask, data.fit_seed);
            let result = fit_multitask(&xs, &cfg)?;
            let precisions = result.precisions.expect("multitask returns all tasks");
            for ((truth, _), theta) in data.tasks.iter().zip(&precisions) {
                let report = aupr_auc(theta, truth)?;
                out.push((report.aupr, report.auc));
            }
        }
        _ => {
            for (truth, x) in &data.tasks {
                let theta = match method {
                    Method::UgladDirect => {
                        fit_direct(&completed(x)?, &fit_config(FitMode::Direct, data.fit_seed))?
                            .precision
                    }
                    Method::UgladCv => {
                        fit_cv(&completed(x)?, &fit_config(FitMode::Cv, data.fit_seed))?.precision
                    }
                    Method::UgladMissing => {
                        fit_missing(x, &fit_config(FitMode::Missing, data.fit_seed))?.precision
                    }
                    Method::BaselineCv => {
                        if x.has_missing() {
                            return Err(CliError::InvalidArgument(
                                "baseline-cv needs complete data; use baseline-mean-impute"
                                    .into(),
                            ));
                        }
                        let grid = default_rho_grid(&covariance(x)?, BASELINE_GRID_POINTS);
                        baseline_cv(x, &grid, BASELINE_FOLDS, data.fit_seed)?
                    }
                    Method::BaselineMeanImpute => {
                        let imputed = completed(x)?;
                        let grid = default_rho_grid(&covariance(&imputed)?, BASELINE_GRID_POINTS);
                        baseline_cv(&imputed, &grid, BASELINE_FOLDS, data.fit_seed)?
                    }
                    Method::UgladMultitask => unreachable!(),
                };
                let report = aupr_auc(&theta, truth)?;
                out.push((report.aupr, report.auc));
            }
        }
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs the full grid; replicates fan out over the worker pool configured by
/// [`run_scenario_with_threads`] or the caller's pool.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<CompareReport, CliError> {
    spec.validate()?;
    let columns = columns_of(spec);
    // Work units: one per (column, replicate); all methods run inside the
    // unit so they share its data.
    let units: Vec<(usize, usize)> = (0..columns.len())
        .flat_map(|c| (0..spec.n_graphs).map(move |r| (c, r)))
        .collect();

    let unit_results: Vec<Result<Vec<(Method, Vec<(f64, f64)>)>, CliError>> = units
        .par_iter()
        .map(|&(c, r)| {
            let data = build_replicate(spec, &columns[c], c, r).map_err(|e| {
                CliError::Numerical(format!("{} graph {r}: {e}", columns[c].label))
            })?;
            let mut per_method = Vec::with_capacity(spec.methods.len());
            for &method in &spec.methods {
                let values = run_method_on_replicate(method, &data).map_err(|e| {
                    CliError::Numerical(format!(
                        "{} {} graph {r}: {e}",
                        method,
                        columns[c].label
                    ))
                })?;
                per_method.push((method, values));
            }
            Ok(per_method)
        })
        .collect();

    let mut cells = Vec::new();
    for (ci, _col) in columns.iter().enumerate() {
        for &method in &spec.methods {
            let mut auprs = Vec::new();
            let mut aucs = Vec::new();
            for (&(c, _r), result) in units.iter().zip(&unit_results) {
                if c != ci {
                    continue;
                }
                let per_method = match result {
                    Ok(v) => v,
                    Err(e) => return Err(CliError::Numerical(e.to_string())),
                };
                for (m, values) in per_method {
                    if *m == method {
                        for &(aupr, auc) in values {
                            auprs.push(aupr);
                            aucs.push(auc);
                        }
                    }
                }
            }
            let (aupr_mean, aupr_std) = mean_std(&auprs);
            let (auc_mean, auc_std) = mean_std(&aucs);
            cells.push(CellStats {
                method,
                column: ci,
                aupr_mean,
                aupr_std,
                auc_mean,
                auc_std,
                n: auprs.len(),
            });
        }
    }
    Ok(CompareReport {
        columns,
        methods: spec.methods.clone(),
        cells,
    })
}

/// Runs the grid inside a dedicated pool of `threads` workers (when given),
/// otherwise on the global pool.
pub fn run_scenario_with_threads(
    spec: &ScenarioSpec,
    threads: Option<usize>,
) -> Result<CompareReport, CliError> {
    match threads {
        None => run_scenario(spec),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(|| run_scenario(spec))
        }
    }
}

/// Two mean±std blocks, one per metric, methods as rows and columns as in
/// the scenario.
pub fn render_pretty(report: &CompareReport) -> String {
    let mut out = String::new();
    let name_width = report
        .methods
        .iter()
        .map(|m| m.name().len())
        .max()
        .unwrap_or(8)
        .max(6);
    for metric in ["AUPR", "AUC"] {
        writeln!(out, "{metric}").unwrap();
        write!(out, "{:<name_width$}", "method").unwrap();
        for col in &report.columns {
            write!(out, "  {:>17}", col.label).unwrap();
        }
        out.push('\n');
        for &method in &report.methods {
            write!(out, "{:<name_width$}", method.name()).unwrap();
            for ci in 0..report.columns.len() {
                let cell = report.cell(method, ci).expect("cell exists");
                let (mean, std) = if metric == "AUPR" {
                    (cell.aupr_mean, cell.aupr_std)
                } else {
                    (cell.auc_mean, cell.auc_std)
                };
                write!(out, "  {:>17}", format!("{mean:.3}\u{b1}{std:.3}")).unwrap();
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Machine-readable cells: `method,column,metric,mean,std,n`.
pub fn render_csv(report: &CompareReport) -> String {
    let mut out = String::from("method,column,metric,mean,std,n\n");
    for cell in &report.cells {
        let label = &report.columns[cell.column].label;
        writeln!(
            out,
            "{},{},aupr,{},{},{}",
            cell.method, label, cell.aupr_mean, cell.aupr_std, cell.n
        )
        .unwrap();
        writeln!(
            out,
            "{},{},auc,{},{},{}",
            cell.method, label, cell.auc_mean, cell.auc_std, cell.n
        )
        .unwrap();
    }
    out
}
