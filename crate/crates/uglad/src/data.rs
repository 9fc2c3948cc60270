//! Sample datasets: an M x D sample matrix with named features, an optional
//! missingness mask, empirical covariance, column-mean imputation, and
//! seeded dropout injection.

use crate::linalg::Matrix;
use crate::rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("dataset contains missing entries; impute first or use the missing-data mode")]
    MissingData,
    #[error("feature '{0}' has no observed values")]
    EmptyColumn(String),
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { got: usize, need: usize },
    #[error("dataset has {names} feature names for {cols} columns")]
    NameCountMismatch { names: usize, cols: usize },
    #[error("non-finite value at row {row}, feature '{feature}'")]
    NonFinite { row: usize, feature: String },
}

/// Sample matrix with feature names and an optional missingness mask.
/// Missing entries are stored as NaN and are always mirrored by the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    data: Matrix,
    mask: Option<Vec<bool>>,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Complete dataset; every entry must be finite.
    pub fn complete(data: Matrix, feature_names: Vec<String>) -> Result<Self, DataError> {
        Self::check_names(&data, &feature_names)?;
        for i in 0..data.rows() {
            for j in 0..data.cols() {
                if !data.at(i, j).is_finite() {
                    return Err(DataError::NonFinite {
                        row: i,
                        feature: feature_names[j].clone(),
                    });
                }
            }
        }
        Ok(Dataset {
            data,
            mask: None,
            feature_names,
        })
    }

    /// Dataset where NaN entries mark missing values. The mask is derived
    /// from the NaN pattern; infinities are rejected.
    pub fn with_missing(data: Matrix, feature_names: Vec<String>) -> Result<Self, DataError> {
        Self::check_names(&data, &feature_names)?;
        let mut mask = vec![false; data.rows() * data.cols()];
        let mut any = false;
        for i in 0..data.rows() {
            for j in 0..data.cols() {
                let v = data.at(i, j);
                if v.is_nan() {
                    mask[i * data.cols() + j] = true;
                    any = true;
                } else if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        row: i,
                        feature: feature_names[j].clone(),
                    });
                }
            }
        }
        Ok(Dataset {
            data,
            mask: any.then_some(mask),
            feature_names,
        })
    }

    fn check_names(data: &Matrix, names: &[String]) -> Result<(), DataError> {
        if names.len() != data.cols() {
            return Err(DataError::NameCountMismatch {
                names: names.len(),
                cols: data.cols(),
            });
        }
        Ok(())
    }

    /// Default feature names `f0..f{d-1}`.
    pub fn default_names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("f{i}")).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.data.rows()
    }

    pub fn n_features(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn has_missing(&self) -> bool {
        self.mask.is_some()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.mask
            .as_ref()
            .map(|m| m[row * self.data.cols() + col])
            .unwrap_or(false)
    }

    pub fn missing_total(&self) -> usize {
        self.mask
            .as_ref()
            .map(|m| m.iter().filter(|&&x| x).count())
            .unwrap_or(0)
    }

    /// Number of missing entries per row.
    pub fn row_missing_counts(&self) -> Vec<usize> {
        let d = self.data.cols();
        (0..self.data.rows())
            .map(|i| (0..d).filter(|&j| self.is_missing(i, j)).count())
            .collect()
    }

    /// New dataset from a subset of rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let d = self.data.cols();
        let data = Matrix::from_fn(rows.len(), d, |i, j| self.data.at(rows[i], j));
        let mask = self.mask.as_ref().map(|m| {
            let mut out = vec![false; rows.len() * d];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    out[i * d + j] = m[r * d + j];
                }
            }
            out
        });
        let mask = mask.filter(|m| m.iter().any(|&x| x));
        Dataset {
            data,
            mask,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Empirical covariance with the maximum-likelihood `1/M` normalizer and
/// mean centering, explicitly symmetrized. The input must be complete.
pub fn covariance(x: &Dataset) -> Result<Matrix, DataError> {
    if x.has_missing() {
        return Err(DataError::MissingData);
    }
    let m = x.n_samples();
    if m < 2 {
        return Err(DataError::TooFewRows { got: m, need: 2 });
    }
    let d = x.n_features();
    let mut means = vec![0.0; d];
    for i in 0..m {
        for (j, mean) in means.iter_mut().enumerate() {
            *mean += x.data().at(i, j);
        }
    }
    for mean in means.iter_mut() {
        *mean /= m as f64;
    }
    let mut s = Matrix::zeros(d, d);
    for i in 0..m {
        for a in 0..d {
            let xa = x.data().at(i, a) - means[a];
            if xa == 0.0 {
                continue;
            }
            for b in a..d {
                let xb = x.data().at(i, b) - means[b];
                s.set(a, b, s.at(a, b) + xa * xb);
            }
        }
    }
    let scale = 1.0 / m as f64;
    for a in 0..d {
        for b in a..d {
            let v = s.at(a, b) * scale;
            s.set(a, b, v);
            s.set(b, a, v);
        }
    }
    Ok(s)
}

/// Replaces every missing entry with the mean of its column's observed
/// values and clears the mask.
pub fn mean_impute(x: &Dataset) -> Result<Dataset, DataError> {
    if !x.has_missing() {
        return Ok(x.clone());
    }
    let (m, d) = (x.n_samples(), x.n_features());
    let mut means = vec![0.0; d];
    for j in 0..d {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..m {
            if !x.is_missing(i, j) {
                sum += x.data().at(i, j);
                count += 1;
            }
        }
        if count == 0 {
            return Err(DataError::EmptyColumn(x.feature_names()[j].clone()));
        }
        means[j] = sum / count as f64;
    }
    let data = Matrix::from_fn(m, d, |i, j| {
        if x.is_missing(i, j) {
            means[j]
        } else {
            x.data().at(i, j)
        }
    });
    Dataset::complete(data, x.feature_names().to_vec())
}

/// Marks exactly `round(fraction * M * D)` uniformly chosen entries as
/// missing. `fraction` must be in `[0, 1)`.
pub fn inject_dropout(x: &Dataset, fraction: f64, seed: u64) -> Dataset {
    assert!(
        (0.0..1.0).contains(&fraction),
        "dropout fraction must be in [0, 1)"
    );
    let total = x.n_samples() * x.n_features();
    let k = (fraction * total as f64).round() as usize;
    if k == 0 {
        return x.clone();
    }
    let mut rng = rng::stream(seed, "dropout");
    let chosen = rand::seq::index::sample(&mut rng, total, k);
    let d = x.n_features();
    let mut data = x.data().clone();
    for idx in chosen.iter() {
        data.set(idx / d, idx % d, f64::NAN);
    }
    Dataset::with_missing(data, x.feature_names().to_vec()).expect("dropout keeps values finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(values: &[&[f64]]) -> Dataset {
        let m = Matrix::from_rows(values);
        let names = Dataset::default_names(m.cols());
        Dataset::with_missing(m, names).unwrap()
    }

    #[test]
    fn covariance_of_sign_flip_rows() {
        let x = toy(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let s = covariance(&x).unwrap();
        let expected = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(s.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn covariance_of_repeated_row_is_zero() {
        let x = toy(&[&[2.0, -3.0, 0.5], &[2.0, -3.0, 0.5]]);
        let s = covariance(&x).unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let m = 40;
        let d = 6;
        let data = Matrix::from_fn(m, d, |_, _| r.gen_range(-2.0..2.0));
        let x = Dataset::complete(data.clone(), Dataset::default_names(d)).unwrap();
        let s = covariance(&x).unwrap();

        // Independent oracle: E[x x^T] - mu mu^T accumulated separately.
        let mut mu = vec![0.0; d];
        let mut second = Matrix::zeros(d, d);
        for i in 0..m {
            for a in 0..d {
                mu[a] += data.at(i, a) / m as f64;
                for b in 0..d {
                    second.set(a, b, second.at(a, b) + data.at(i, a) * data.at(i, b) / m as f64);
                }
            }
        }
        let oracle = Matrix::from_fn(d, d, |a, b| second.at(a, b) - mu[a] * mu[b]);
        assert!(s.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn covariance_rejects_missing_and_tiny() {
        let x = toy(&[&[1.0, f64::NAN], &[0.0, 1.0]]);
        assert_eq!(covariance(&x), Err(DataError::MissingData));
        let y = toy(&[&[1.0, 2.0]]);
        assert!(matches!(covariance(&y), Err(DataError::TooFewRows { .. })));
    }

    #[test]
    fn mean_impute_fills_column_mean() {
        let x = toy(&[&[1.0], &[f64::NAN], &[3.0]]);
        let imputed = mean_impute(&x).unwrap();
        assert!(!imputed.has_missing());
        assert_eq!(imputed.data().at(0, 0), 1.0);
        assert_eq!(imputed.data().at(1, 0), 2.0);
        assert_eq!(imputed.data().at(2, 0), 3.0);
    }

    #[test]
    fn mean_impute_no_missing_is_identity() {
        let x = toy(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mean_impute(&x).unwrap(), x);
    }

    #[test]
    fn mean_impute_imputed_entries_equal_observed_mean() {
        let x = toy(&[
            &[1.0, 5.0, f64::NAN],
            &[f64::NAN, 7.0, 2.0],
            &[4.0, f64::NAN, 8.0],
            &[7.0, 3.0, 5.0],
        ]);
        let imputed = mean_impute(&x).unwrap();
        for j in 0..3 {
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..4 {
                if !x.is_missing(i, j) {
                    sum += x.data().at(i, j);
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            for i in 0..4 {
                if x.is_missing(i, j) {
                    assert_eq!(imputed.data().at(i, j), mean);
                }
            }
        }
    }

    #[test]
    fn mean_impute_rejects_empty_column() {
        let x = toy(&[&[f64::NAN, 1.0], &[f64::NAN, 2.0]]);
        assert_eq!(mean_impute(&x), Err(DataError::EmptyColumn("f0".into())));
    }

    #[test]
    fn dropout_count_and_determinism() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let data = Matrix::from_fn(10, 10, |_, _| r.gen_range(-1.0..1.0));
        let x = Dataset::complete(data, Dataset::default_names(10)).unwrap();

        assert_eq!(inject_dropout(&x, 0.0, 1), x);

        let half = inject_dropout(&x, 0.5, 1);
        assert_eq!(half.missing_total(), 50);

        let again = inject_dropout(&x, 0.5, 1);
        assert_eq!(half, again);

        let other = inject_dropout(&x, 0.5, 2);
        assert_eq!(other.missing_total(), 50);
        assert_ne!(half, other);
    }
}
