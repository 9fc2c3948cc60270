//! Training loop and optimization modes.
//!
//! Every mode runs the same epoch structure: unroll the network on one or
//! more input covariances, score the resulting precision estimates with the
//! unsupervised likelihood loss, backpropagate, and apply one Adam update
//! to the shared parameters. The modes differ only in how tasks are built:
//!
//! - direct: one task, forward and loss both on the full covariance;
//! - cv: one task on the training split, epoch selection by the held-out
//!   split's loss;
//! - multitask: K tasks with per-task covariances and a mean loss;
//! - missing: column-mean imputation, stratified row batches, every batch
//!   scored against the full-data covariance, consensus combination.

use crate::autodiff::Tape;
use crate::data::{covariance, mean_impute, DataError, Dataset};
use crate::glad::{
    build_forward, collect_param_grads, params_to_tape, uglad_loss, ForwardOverrides, GladError,
    GladParams, UnrollConfig,
};
use crate::linalg::{LinalgError, Matrix};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature '{feature}' has zero variance")]
    DegenerateData { feature: String },
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { got: usize, need: usize },
    #[error("task dimension mismatch: task {task} has {got} features, expected {expected}")]
    DimensionMismatch {
        task: usize,
        got: usize,
        expected: usize,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Glad(#[from] GladError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl From<crate::autodiff::AutodiffError> for FitError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        FitError::Glad(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Direct,
    Cv,
    Multitask,
    Missing,
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FitMode::Direct => "direct",
            FitMode::Cv => "cv",
            FitMode::Multitask => "multitask",
            FitMode::Missing => "missing",
        };
        f.write_str(s)
    }
}

pub const DEFAULT_EPOCHS: usize = 250;
pub const DEFAULT_LEARNING_RATE: f64 = 0.002;
pub const LEARNING_RATE_RANGE: (f64, f64) = (0.001, 0.005);
/// Stop when the training loss improves by less than this over the window.
pub const EARLY_STOP_DELTA: f64 = 1e-6;
pub const EARLY_STOP_WINDOW: usize = 25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub mode: FitMode,
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate is kept inside [`LEARNING_RATE_RANGE`] unless this
    /// is set explicitly.
    pub allow_lr_outside_range: bool,
    pub unroll: UnrollConfig,
    /// Fraction of rows held out in cv mode.
    pub cv_holdout: f64,
    /// Fold count for missing-data batches.
    pub folds: usize,
    pub seed: u64,
    /// Multitask variant that trains on an in-task split and scores against
    /// held-out covariances.
    pub multitask_split: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mode: FitMode::Direct,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            allow_lr_outside_range: false,
            unroll: UnrollConfig::default(),
            cv_holdout: 0.3,
            folds: 3,
            seed: 0,
            multitask_split: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.epochs == 0 {
            return Err(FitError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FitError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        let (lo, hi) = LEARNING_RATE_RANGE;
        if !self.allow_lr_outside_range
            && !(lo..=hi).contains(&self.learning_rate)
        {
            return Err(FitError::InvalidConfig(format!(
                "learning rate {} outside [{lo}, {hi}]; set allow_lr_outside_range to override",
                self.learning_rate
            )));
        }
        if !(self.cv_holdout > 0.0 && self.cv_holdout < 1.0) {
            return Err(FitError::InvalidConfig(
                "cv holdout fraction must be in (0, 1)".into(),
            ));
        }
        if self.folds < 2 {
            return Err(FitError::InvalidConfig(
                "missing-data mode needs at least 2 folds".into(),
            ));
        }
        self.unroll.validate()?;
        Ok(())
    }
}

/// Fit output: the recovered precision estimate(s) plus training curves and
/// the configuration echo.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub mode: FitMode,
    /// Recovered precision (consensus matrix in missing mode, first task in
    /// multitask mode).
    pub precision: Matrix,
    /// Per-task precisions (multitask mode).
    pub precisions: Option<Vec<Matrix>>,
    /// Per-batch precisions behind the consensus (missing mode).
    pub batch_precisions: Option<Vec<Matrix>>,
    /// Training loss per epoch (may be shorter than `epochs` when the early
    /// stop triggers).
    pub loss_history: Vec<f64>,
    /// Held-out loss per epoch (cv mode).
    pub val_history: Option<Vec<f64>>,
    /// Zero-based epoch whose held-out loss was minimal (cv mode).
    pub best_epoch: Option<usize>,
    pub seed: u64,
    pub config: FitConfig,
    pub consensus: bool,
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment accumulators with shapes mirroring the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        AdamState {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), FitError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(FitError::LengthMismatch(format!(
            "{} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.same_shape(g) {
            return Err(FitError::LengthMismatch(format!(
                "parameter {}x{} vs gradient {}x{}",
                p.rows(),
                p.cols(),
                g.rows(),
                g.cols()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared training loop
// ---------------------------------------------------------------------------

/// One optimization task: the covariance fed to the unrolled network and the
/// covariance used in its loss term.
struct TaskSpec {
    s_forward: Matrix,
    s_loss: Matrix,
}

struct TrainOutcome {
    loss_history: Vec<f64>,
    val_history: Option<Vec<f64>>,
    best_epoch: Option<usize>,
    best_theta: Option<Matrix>,
    final_thetas: Vec<Matrix>,
}

fn early_stop(history: &[f64]) -> bool {
    let e = history.len();
    if e <= EARLY_STOP_WINDOW {
        return false;
    }
    history[e - 1 - EARLY_STOP_WINDOW] - history[e - 1] < EARLY_STOP_DELTA
}

fn train_loop(
    tasks: &[TaskSpec],
    cfg: &FitConfig,
    validation: Option<&Matrix>,
) -> Result<TrainOutcome, FitError> {
    let k = tasks.len();
    assert!(k >= 1);
    let mut params = GladParams::init(cfg.seed);
    let mut adam = AdamState::new(&params.tensors());
    let tensor_shapes: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .map(|t| (t.rows(), t.cols()))
        .collect();

    let mut loss_history = Vec::new();
    let mut val_history = validation.map(|_| Vec::new());
    let mut best: Option<(usize, f64, Matrix)> = None;
    let mut final_thetas: Vec<Matrix> = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut grad_acc: Vec<Matrix> = tensor_shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();
        let mut epoch_loss = 0.0;
        let mut thetas = Vec::with_capacity(k);

        for task in tasks {
            let mut tape = Tape::new();
            let nodes = params_to_tape(&mut tape, &params)?;
            let fwd = build_forward(
                &mut tape,
                &nodes,
                &task.s_forward,
                &cfg.unroll,
                &ForwardOverrides::default(),
                false,
            )?;
            let s_loss = tape.constant(task.s_loss.clone());
            let trace = tape.trace_inner(s_loss, fwd.state.theta)?;
            let ld = tape.log_det_spd(fwd.state.theta)?;
            let loss_node = tape.sub(trace, ld)?;
            let loss_value = tape.scalar_value(loss_node);
            let grads = tape.backward(loss_node);
            let task_grads = collect_param_grads(&tape, &nodes, &grads);
            for (acc, g) in grad_acc.iter_mut().zip(&task_grads) {
                acc.axpy(1.0 / k as f64, g);
            }
            epoch_loss += loss_value / k as f64;
            thetas.push(tape.value(fwd.state.theta).clone());
        }

        if !epoch_loss.is_finite() {
            return Err(FitError::NumericalFailure(format!(
                "training loss became non-finite at epoch {epoch}"
            )));
        }
        loss_history.push(epoch_loss);

        if let (Some(s_valid), Some(vh)) = (validation, val_history.as_mut()) {
            let vloss = uglad_loss(s_valid, &thetas[0])?;
            if !vloss.is_finite() {
                return Err(FitError::NumericalFailure(format!(
                    "validation loss became non-finite at epoch {epoch}"
                )));
            }
            let improved = best.as_ref().map(|(_, b, _)| vloss < *b).unwrap_or(true);
            if improved {
                best = Some((epoch, vloss, thetas[0].clone()));
            }
            vh.push(vloss);
        }

        final_thetas = thetas;
        {
            let mut tensors = params.tensors_mut();
            adam_step(&mut tensors, &grad_acc, &mut adam, cfg.learning_rate)?;
        }
        if early_stop(&loss_history) {
            break;
        }
    }

    let (best_epoch, best_theta) = match best {
        Some((e, _, t)) => (Some(e), Some(t)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        loss_history,
        val_history,
        best_epoch,
        best_theta,
        final_thetas,
    })
}

fn check_feature_variance(x: &Dataset) -> Result<(), FitError> {
    let (m, d) = (x.n_samples(), x.n_features());
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..m {
            mean += x.data().at(i, j);
        }
        mean /= m as f64;
        let mut var = 0.0;
        for i in 0..m {
            let c = x.data().at(i, j) - mean;
            var += c * c;
        }
        var /= m as f64;
        if var <= 1e-12 * mean.mul_add(mean, 1.0) {
            return Err(FitError::DegenerateData {
                feature: x.feature_names()[j].clone(),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

/// Direct mode: train and score on the covariance of the complete data,
/// return the final epoch's estimate.
pub fn fit_direct(x: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    if x.has_missing() {
        return Err(DataError::MissingData.into());
    }
    check_feature_variance(x)?;
    let s = covariance(x)?;
    let tasks = [TaskSpec {
        s_forward: s.clone(),
        s_loss: s,
    }];
    let outcome = train_loop(&tasks, cfg, None)?;
    Ok(FitResult {
        mode: FitMode::Direct,
        precision: outcome.final_thetas.into_iter().next().expect("one task"),
        precisions: None,
        batch_precisions: None,
        loss_history: outcome.loss_history,
        val_history: None,
        best_epoch: None,
        seed: cfg.seed,
        config: cfg.clone(),
        consensus: false,
    })
}

/// CV mode: one seeded shuffle split, training on the larger part, epoch
/// selection by the held-out loss.
pub fn fit_cv(x: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    if x.has_missing() {
        return Err(DataError::MissingData.into());
    }
    let m = x.n_samples();
    if m < 4 {
        return Err(FitError::TooFewRows { got: m, need: 4 });
    }
    check_feature_variance(x)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "cv-split"));
    let n_valid = ((m as f64 * cfg.cv_holdout).round() as usize).clamp(2, m - 2);
    let valid: Vec<usize> = order[..n_valid].to_vec();
    let train: Vec<usize> = order[n_valid..].to_vec();
    fit_cv_with_indices(x, cfg, &train, &valid)
}

/// CV training on explicit row splits (the public entry point derives them
/// from the seed; tests may pass degenerate splits).
pub(crate) fn fit_cv_with_indices(
    x: &Dataset,
    cfg: &FitConfig,
    train: &[usize],
    valid: &[usize],
) -> Result<FitResult, FitError> {
    let s_train = covariance(&x.select_rows(train))?;
    let s_valid = covariance(&x.select_rows(valid))?;
    let tasks = [TaskSpec {
        s_forward: s_train.clone(),
        s_loss: s_train,
    }];
    let outcome = train_loop(&tasks, cfg, Some(&s_valid))?;
    Ok(FitResult {
        mode: FitMode::Cv,
        precision: outcome.best_theta.expect("validation tracked"),
        precisions: None,
        batch_precisions: None,
        loss_history: outcome.loss_history,
        val_history: outcome.val_history,
        best_epoch: outcome.best_epoch,
        seed: cfg.seed,
        config: cfg.clone(),
        consensus: false,
    })
}

/// Multitask mode: a single parameter set trained on the mean loss across
/// all task covariances; returns one precision per task.
pub fn fit_multitask(xs: &[Dataset], cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(FitError::LengthMismatch("no tasks given".into()));
    }
    let d = xs[0].n_features();
    let mut tasks = Vec::with_capacity(xs.len());
    for (k, x) in xs.iter().enumerate() {
        if x.n_features() != d {
            return Err(FitError::DimensionMismatch {
                task: k,
                got: x.n_features(),
                expected: d,
            });
        }
        if x.has_missing() {
            return Err(DataError::MissingData.into());
        }
        check_feature_variance(x)?;
        if cfg.multitask_split {
            let m = x.n_samples();
            if m < 4 {
                return Err(FitError::TooFewRows { got: m, need: 4 });
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng::substream(cfg.seed, "mt-split", k as u64));
            let n_valid = ((m as f64 * cfg.cv_holdout).round() as usize).clamp(2, m - 2);
            let s_valid = covariance(&x.select_rows(&order[..n_valid]))?;
            let s_train = covariance(&x.select_rows(&order[n_valid..]))?;
            tasks.push(TaskSpec {
                s_forward: s_train,
                s_loss: s_valid,
            });
        } else {
            let s = covariance(x)?;
            tasks.push(TaskSpec {
                s_forward: s.clone(),
                s_loss: s,
            });
        }
    }
    let outcome = train_loop(&tasks, cfg, None)?;
    Ok(FitResult {
        mode: FitMode::Multitask,
        precision: outcome.final_thetas[0].clone(),
        precisions: Some(outcome.final_thetas),
        batch_precisions: None,
        loss_history: outcome.loss_history,
        val_history: None,
        best_epoch: None,
        seed: cfg.seed,
        config: cfg.clone(),
        consensus: false,
    })
}

/// Distributes rows over `k` folds: rows are shuffled (seeded tie breaking),
/// stably sorted by descending missing count, and dealt round-robin, so rows
/// with missing values spread evenly.
pub fn stratified_folds(
    missing_counts: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, FitError> {
    if k < 2 {
        return Err(FitError::InvalidConfig("need at least 2 folds".into()));
    }
    let n = missing_counts.len();
    if n < k {
        return Err(FitError::TooFewRows { got: n, need: k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "folds"));
    order.sort_by(|&a, &b| missing_counts[b].cmp(&missing_counts[a]));
    let mut assignment = vec![0usize; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % k;
    }
    Ok(assignment)
}

const CONSENSUS_VOTE_EPS: f64 = 1e-8;

/// Entrywise combination of batch estimates: the majority sign over entries
/// with magnitude above 1e-8 times the minimum absolute value across all
/// batches; sign ties (and all-zero votes) produce 0.
pub fn consensus_combine(thetas: &[Matrix]) -> Result<Matrix, FitError> {
    let Some(first) = thetas.first() else {
        return Err(FitError::LengthMismatch("no matrices to combine".into()));
    };
    for (k, t) in thetas.iter().enumerate() {
        if !t.same_shape(first) {
            return Err(FitError::LengthMismatch(format!(
                "matrix {k} is {}x{}, expected {}x{}",
                t.rows(),
                t.cols(),
                first.rows(),
                first.cols()
            )));
        }
    }
    let out = Matrix::from_fn(first.rows(), first.cols(), |i, j| {
        let mut pos = 0usize;
        let mut neg = 0usize;
        let mut min_abs = f64::INFINITY;
        for t in thetas {
            let v = t.at(i, j);
            min_abs = min_abs.min(v.abs());
            if v > CONSENSUS_VOTE_EPS {
                pos += 1;
            } else if v < -CONSENSUS_VOTE_EPS {
                neg += 1;
            }
        }
        if pos > neg {
            min_abs
        } else if neg > pos {
            -min_abs
        } else {
            0.0
        }
    });
    Ok(out)
}

/// Missing-data mode: mean imputation, stratified batches, joint training
/// against the full-data covariance, and an entrywise consensus combination
/// of the batch estimates.
pub fn fit_missing(x: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    cfg.validate()?;
    let k = cfg.folds;
    let imputed = mean_impute(x)?;
    check_feature_variance(&imputed)?;
    let s_full = covariance(&imputed)?;
    let assignment = stratified_folds(&x.row_missing_counts(), k, cfg.seed)?;

    let m = x.n_samples();
    let mut tasks = Vec::with_capacity(k);
    for fold in 0..k {
        let batch_rows: Vec<usize> = (0..m).filter(|&r| assignment[r] != fold).collect();
        if batch_rows.len() < 2 {
            return Err(FitError::TooFewRows {
                got: m,
                need: 2 * k,
            });
        }
        let s_batch = covariance(&imputed.select_rows(&batch_rows))?;
        tasks.push(TaskSpec {
            s_forward: s_batch,
            s_loss: s_full.clone(),
        });
    }

    let outcome = train_loop(&tasks, cfg, None)?;
    let consensus = consensus_combine(&outcome.final_thetas)?;
    Ok(FitResult {
        mode: FitMode::Missing,
        precision: consensus,
        precisions: None,
        batch_precisions: Some(outcome.final_thetas),
        loss_history: outcome.loss_history,
        val_history: None,
        best_epoch: None,
        seed: cfg.seed,
        config: cfg.clone(),
        consensus: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::log_det_matrix;
    use crate::synth::{generate_precision, sample_mvn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_cfg(epochs: usize, seed: u64) -> FitConfig {
        FitConfig {
            epochs,
            seed,
            ..FitConfig::default()
        }
    }

    fn gaussian_dataset(d: usize, m: usize, seed: u64) -> Dataset {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = Matrix::from_fn(m, d, |_, _| r.sample(rand_distr::StandardNormal));
        Dataset::complete(data, Dataset::default_names(d)).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Matrix::from_rows(&[&[1.0, -2.0]]);
        let g = Matrix::zeros(1, 2);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut state, 0.01).unwrap();
        assert_eq!(p, Matrix::from_rows(&[&[1.0, -2.0]]));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let g = 0.37;
        let lr = 0.002;
        let mut p = Matrix::scalar(1.0);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Matrix::scalar(g)], &mut state, lr).unwrap();
        let update = p.as_scalar() - 1.0;
        assert!((update + lr).abs() < 1e-7 * lr, "update {update}");
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut p = Matrix::from_rows(&[&[0.3, -0.25, 0.2, 0.15]]);
        let start_norm = p.frob_norm();
        let mut state = AdamState::new(&[&p]);
        let mut last_norm = start_norm;
        for step in 0..200 {
            let g = p.scale(2.0);
            adam_step(&mut [&mut p], &[g], &mut state, 0.01).unwrap();
            let norm = p.frob_norm();
            if step >= 20 && norm > 0.1 * start_norm {
                assert!(norm < last_norm, "stalled at step {step}");
            }
            last_norm = norm;
        }
        assert!(p.frob_norm() < 0.1 * start_norm, "ended at {}", p.frob_norm());
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(1, 2);
        let mut state = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[g], &mut state, 0.01).is_err());
    }

    #[test]
    fn direct_fit_approaches_likelihood_bound() {
        let x = gaussian_dataset(5, 2000, 3);
        let cfg = quick_cfg(100, 1);
        let result = fit_direct(&x, &cfg).unwrap();
        let s = covariance(&x).unwrap();
        let bound = log_det_matrix(&s).unwrap() + 5.0;
        let final_loss = *result.loss_history.last().unwrap();
        assert!(final_loss >= bound - 1e-9);
        assert!(
            (final_loss - bound).abs() <= 0.05 * bound.abs(),
            "final {final_loss}, bound {bound}"
        );
    }

    #[test]
    fn direct_fit_is_deterministic() {
        let x = gaussian_dataset(4, 60, 5);
        let cfg = quick_cfg(20, 9);
        let a = fit_direct(&x, &cfg).unwrap();
        let b = fit_direct(&x, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.precision, b.precision);
    }

    #[test]
    fn direct_fit_rejects_constant_feature() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let data = Matrix::from_fn(20, 3, |_, j| if j == 1 { 2.5 } else { r.gen_range(-1.0..1.0) });
        let x = Dataset::complete(data, Dataset::default_names(3)).unwrap();
        match fit_direct(&x, &quick_cfg(5, 0)) {
            Err(FitError::DegenerateData { feature }) => assert_eq!(feature, "f1"),
            other => panic!("expected DegenerateData, got {other:?}"),
        }
    }

    #[test]
    fn direct_fit_is_column_permutation_equivariant() {
        let truth = generate_precision(5, 0.4, 21).unwrap();
        let x = sample_mvn(&truth, 80, 22);
        let cfg = quick_cfg(30, 7);
        let base = fit_direct(&x, &cfg).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let pdata = Matrix::from_fn(80, 5, |i, j| x.data().at(i, perm[j]));
        let px = Dataset::complete(pdata, Dataset::default_names(5)).unwrap();
        let permuted = fit_direct(&px, &cfg).unwrap();

        let expected = Matrix::from_fn(5, 5, |i, j| base.precision.at(perm[i], perm[j]));
        assert!(
            permuted.precision.max_abs_diff(&expected) < 1e-6,
            "distance {}",
            permuted.precision.max_abs_diff(&expected)
        );
    }

    #[test]
    fn cv_best_epoch_minimizes_validation_loss() {
        let truth = generate_precision(6, 0.3, 31).unwrap();
        let x = sample_mvn(&truth, 40, 32);
        let mut cfg = quick_cfg(40, 13);
        cfg.mode = FitMode::Cv;
        let result = fit_cv(&x, &cfg).unwrap();
        let vals = result.val_history.as_ref().unwrap();
        assert_eq!(vals.len(), result.loss_history.len());
        let best = result.best_epoch.unwrap();
        for (e, v) in vals.iter().enumerate() {
            assert!(vals[best] <= *v, "epoch {e} beats best");
        }
    }

    #[test]
    fn cv_with_identical_splits_matches_direct_training() {
        let x = gaussian_dataset(4, 30, 41);
        let cfg = quick_cfg(25, 17);
        let all: Vec<usize> = (0..30).collect();
        let cv = fit_cv_with_indices(&x, &cfg, &all, &all).unwrap();
        let direct = fit_direct(&x, &cfg).unwrap();
        assert_eq!(cv.loss_history, direct.loss_history);
        assert_eq!(cv.val_history.as_ref().unwrap(), &cv.loss_history);
        // The best epoch holds the minimal training loss.
        let best = cv.best_epoch.unwrap();
        for v in &cv.loss_history {
            assert!(cv.loss_history[best] <= *v);
        }
    }

    #[test]
    fn cv_needs_four_rows() {
        let x = gaussian_dataset(3, 3, 51);
        assert!(matches!(
            fit_cv(&x, &quick_cfg(5, 0)),
            Err(FitError::TooFewRows { .. })
        ));
    }

    #[test]
    fn multitask_single_task_equals_direct() {
        let x = gaussian_dataset(4, 50, 61);
        let cfg = quick_cfg(30, 23);
        let direct = fit_direct(&x, &cfg).unwrap();
        let multi = fit_multitask(std::slice::from_ref(&x), &cfg).unwrap();
        assert_eq!(direct.loss_history, multi.loss_history);
        assert_eq!(direct.precision, multi.precisions.as_ref().unwrap()[0]);
    }

    #[test]
    fn multitask_identical_tasks_give_identical_precisions() {
        let x = gaussian_dataset(4, 40, 71);
        let cfg = quick_cfg(20, 29);
        let result = fit_multitask(&[x.clone(), x], &cfg).unwrap();
        let ps = result.precisions.unwrap();
        assert_eq!(ps[0], ps[1]);
    }

    #[test]
    fn multitask_rejects_dimension_mismatch() {
        let a = gaussian_dataset(4, 20, 81);
        let b = gaussian_dataset(5, 20, 82);
        assert!(matches!(
            fit_multitask(&[a, b], &quick_cfg(5, 0)),
            Err(FitError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stratified_folds_balance_complete_rows() {
        let counts = vec![0usize; 9];
        let folds = stratified_folds(&counts, 3, 1).unwrap();
        let mut sizes = [0usize; 3];
        for f in folds {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [3, 3, 3]);
    }

    #[test]
    fn stratified_folds_spread_missing_rows() {
        // Rows 2, 5, 7 carry missing values; one must land in each fold.
        let mut counts = vec![0usize; 9];
        counts[2] = 3;
        counts[5] = 1;
        counts[7] = 2;
        let folds = stratified_folds(&counts, 3, 4).unwrap();
        let mut seen = [0usize; 3];
        for row in [2, 5, 7] {
            seen[folds[row]] += 1;
        }
        assert_eq!(seen, [1, 1, 1]);
    }

    #[test]
    fn stratified_folds_max_min_difference_at_most_one() {
        let mut r = ChaCha8Rng::seed_from_u64(91);
        for trial in 0..20 {
            let n = r.gen_range(8..40);
            let counts: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            let folds = stratified_folds(&counts, 4, trial).unwrap();
            let mut with_missing = [0usize; 4];
            for (row, &c) in counts.iter().enumerate() {
                if c > 0 {
                    with_missing[folds[row]] += 1;
                }
            }
            let max = *with_missing.iter().max().unwrap();
            let min = *with_missing.iter().min().unwrap();
            assert!(max - min <= 1, "trial {trial}: {with_missing:?}");
        }
    }

    #[test]
    fn consensus_majority_sign_and_min_magnitude() {
        let a = Matrix::scalar(0.5);
        let b = Matrix::scalar(-0.2);
        let c = Matrix::scalar(0.4);
        let out = consensus_combine(&[a, b, c]).unwrap();
        assert!((out.as_scalar() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn consensus_identical_inputs_unchanged() {
        let m = Matrix::from_rows(&[&[1.0, -0.3], &[-0.3, 2.0]]);
        let out = consensus_combine(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert!(out.max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn consensus_even_tie_resolves_to_zero() {
        let out = consensus_combine(&[Matrix::scalar(0.5), Matrix::scalar(-0.5)]).unwrap();
        assert_eq!(out.as_scalar(), 0.0);
    }

    #[test]
    fn consensus_magnitude_bound_and_symmetry() {
        let mut r = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..50 {
            let mats: Vec<Matrix> = (0..3)
                .map(|_| Matrix::from_fn(4, 4, |_, _| r.gen_range(-1.0..1.0)).symmetrized())
                .collect();
            let out = consensus_combine(&mats).unwrap();
            assert!(out.symmetry_violation() < 1e-15);
            for i in 0..4 {
                for j in 0..4 {
                    let min_abs = mats.iter().map(|m| m.at(i, j).abs()).fold(f64::INFINITY, f64::min);
                    assert!(out.at(i, j).abs() <= min_abs + 1e-15);
                }
            }
        }
    }

    #[test]
    fn missing_fit_produces_consensus_result() {
        let truth = generate_precision(6, 0.3, 111).unwrap();
        let x = sample_mvn(&truth, 60, 112);
        let masked = crate::data::inject_dropout(&x, 0.2, 113);
        let mut cfg = quick_cfg(20, 31);
        cfg.mode = FitMode::Missing;
        let result = fit_missing(&masked, &cfg).unwrap();
        assert!(result.consensus);
        let batches = result.batch_precisions.as_ref().unwrap();
        assert_eq!(batches.len(), cfg.folds);
        assert!(result.precision.symmetry_violation() < 1e-9);
        assert!(result.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn early_stop_window_logic() {
        let flat: Vec<f64> = (0..30).map(|_| 1.0).collect();
        assert!(early_stop(&flat));
        let improving: Vec<f64> = (0..30).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert!(!early_stop(&improving));
        let short: Vec<f64> = (0..10).map(|_| 1.0).collect();
        assert!(!early_stop(&short));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FitConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = 0.1;
        assert!(cfg.validate().is_err());
        cfg.allow_lr_outside_range = true;
        assert!(cfg.validate().is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
