//! Threshold-free edge-ranking metrics over the off-diagonal entries of a
//! recovered precision matrix: area under the ROC curve (rank statistic,
//! ties count one half) and area under the precision-recall curve (average
//! precision with step interpolation).

use crate::linalg::Matrix;
use crate::synth::GroundTruth;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction is {got}x{got}, truth is {expected}x{expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("degenerate labels: every candidate edge is {0}")]
    DegenerateLabels(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub aupr: f64,
    pub auc: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Scores every unordered off-diagonal pair by `|predicted_ij|` against the
/// ground-truth support and computes AUC and AUPR.
pub fn aupr_auc(predicted: &Matrix, truth: &GroundTruth) -> Result<MetricReport, MetricsError> {
    let d = truth.dim();
    if predicted.rows() != d || predicted.cols() != d {
        return Err(MetricsError::DimensionMismatch {
            got: predicted.rows(),
            expected: d,
        });
    }
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            pairs.push((predicted.at(i, j).abs(), truth.adjacency[i][j]));
        }
    }
    ranked_metrics(&pairs)
}

/// AUC/AUPR from explicit (score, label) pairs.
pub fn ranked_metrics(pairs: &[(f64, bool)]) -> Result<MetricReport, MetricsError> {
    let n_positive = pairs.iter().filter(|(_, l)| *l).count();
    let n_negative = pairs.len() - n_positive;
    if n_positive == 0 {
        return Err(MetricsError::DegenerateLabels("negative"));
    }
    if n_negative == 0 {
        return Err(MetricsError::DegenerateLabels("positive"));
    }

    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();

    // AUC as the Mann-Whitney rank statistic over ascending scores with
    // average ranks inside tie groups.
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));
    let mut rank_sum_pos = 0.0;
    let mut idx = 0;
    while idx < sorted.len() {
        let mut end = idx + 1;
        while end < sorted.len() && sorted[end].0 == sorted[idx].0 {
            end += 1;
        }
        // Ranks are 1-based: group occupies ranks idx+1 ..= end.
        let avg_rank = (idx + 1 + end) as f64 / 2.0;
        for item in &sorted[idx..end] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        idx = end;
    }
    let np = n_positive as f64;
    let nn = n_negative as f64;
    let auc = (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);

    // Average precision over descending thresholds; one step per distinct
    // score, no interpolation between steps.
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut aupr = 0.0;
    let mut idx = 0;
    while idx < sorted.len() {
        let mut end = idx + 1;
        while end < sorted.len() && sorted[end].0 == sorted[idx].0 {
            end += 1;
        }
        for item in &sorted[idx..end] {
            if item.1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / np;
        let precision = tp as f64 / (tp + fp) as f64;
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
        idx = end;
    }

    Ok(MetricReport {
        aupr,
        auc,
        n_positive,
        n_negative,
    })
}
