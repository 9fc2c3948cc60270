//! Synthetic benchmark generation: sparse ground-truth precision matrices
//! with unit smallest eigenvalue, and seeded multivariate-normal sampling
//! from the induced covariance.

use crate::data::Dataset;
use crate::linalg::{cholesky, spd_inverse, sym_eig, LinalgError, Matrix, SpdMatrix};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Ground-truth precision matrix and its off-diagonal support.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub precision: SpdMatrix,
    /// Symmetric boolean support of the off-diagonal entries; diagonal false.
    pub adjacency: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        self.precision.dim()
    }

    pub fn edge_count(&self) -> usize {
        let d = self.dim();
        let mut n = 0;
        for i in 0..d {
            for j in (i + 1)..d {
                if self.adjacency[i][j] {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Serialized form of a ground truth instance.
#[derive(Serialize, Deserialize)]
pub struct GroundTruthDoc {
    pub format_version: String,
    pub features: Vec<String>,
    pub precision: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<bool>>,
}

pub const TRUTH_FORMAT_VERSION: &str = "1";

impl GroundTruth {
    pub fn to_doc(&self, features: &[String]) -> GroundTruthDoc {
        let d = self.dim();
        let m = self.precision.matrix();
        GroundTruthDoc {
            format_version: TRUTH_FORMAT_VERSION.to_string(),
            features: features.to_vec(),
            precision: (0..d).map(|i| m.row(i).to_vec()).collect(),
            adjacency: self.adjacency.clone(),
        }
    }

    pub fn from_doc(doc: &GroundTruthDoc) -> Result<Self, LinalgError> {
        let d = doc.precision.len();
        let m = Matrix::from_fn(d, d, |i, j| doc.precision[i][j]);
        Ok(GroundTruth {
            precision: SpdMatrix::new(m)?,
            adjacency: doc.adjacency.clone(),
        })
    }
}

/// Draws a sparse precision matrix: off-diagonal values uniform in (-1, 1)
/// kept on an Erdos-Renyi pattern with edge probability `p`, then shifted by
/// the unique multiple of the identity that makes the smallest eigenvalue
/// exactly 1.
pub fn generate_precision(d: usize, p: f64, seed: u64) -> Result<GroundTruth, LinalgError> {
    assert!(d >= 2, "need at least 2 features");
    assert!((0.0..=1.0).contains(&p), "edge probability must be in [0, 1]");
    let mut r = rng::stream(seed, "precision");
    let mut a = Matrix::zeros(d, d);
    let mut adjacency = vec![vec![false; d]; d];
    for i in 0..d {
        for j in (i + 1)..d {
            let present = r.gen::<f64>() < p;
            let value: f64 = r.gen_range(-1.0..1.0);
            if present {
                a.set(i, j, value);
                a.set(j, i, value);
                adjacency[i][j] = true;
                adjacency[j][i] = true;
            }
        }
    }
    let (w, _) = sym_eig(&a)?;
    let shift = 1.0 - w[0];
    for i in 0..d {
        a.set(i, i, a.at(i, i) + shift);
    }
    Ok(GroundTruth {
        precision: SpdMatrix::new(a)?,
        adjacency,
    })
}

/// Samples `m` i.i.d. rows from the zero-mean Gaussian whose covariance is
/// the inverse of the ground-truth precision: `X = G L^T` with `L` the
/// Cholesky factor of the covariance and `G` seeded standard normal.
pub fn sample_mvn(truth: &GroundTruth, m: usize, seed: u64) -> Dataset {
    assert!(m >= 1, "need at least one sample");
    let d = truth.dim();
    let sigma = spd_inverse(&truth.precision);
    let l = cholesky(&sigma);
    let mut r = rng::stream(seed, "samples");
    let g = Matrix::from_fn(m, d, |_, _| r.sample(StandardNormal));
    let x = g.matmul(&l.transpose());
    Dataset::complete(x, Dataset::default_names(d)).expect("gaussian samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::covariance;
    use crate::linalg::spd_inverse_matrix;

    #[test]
    fn empty_graph_gives_identity() {
        let truth = generate_precision(6, 0.0, 3).unwrap();
        assert!(truth.precision.matrix().max_abs_diff(&Matrix::identity(6)) < 1e-12);
        assert_eq!(truth.edge_count(), 0);
    }

    #[test]
    fn dense_two_by_two_has_unit_smallest_eigenvalue() {
        let truth = generate_precision(2, 1.0, 4).unwrap();
        assert_eq!(truth.edge_count(), 1);
        let (w, _) = sym_eig(truth.precision.matrix()).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smallest_eigenvalue_is_one_on_every_draw() {
        for seed in 0..30 {
            let truth = generate_precision(12, 0.15, seed).unwrap();
            let (w, _) = sym_eig(truth.precision.matrix()).unwrap();
            assert!((w[0] - 1.0).abs() < 1e-9, "seed {seed}: {}", w[0]);
            // Support symmetric with zero diagonal.
            for i in 0..12 {
                assert!(!truth.adjacency[i][i]);
                for j in 0..12 {
                    assert_eq!(truth.adjacency[i][j], truth.adjacency[j][i]);
                    let present = truth.precision.matrix().at(i, j) != 0.0;
                    if i != j && truth.adjacency[i][j] {
                        assert!(present);
                    }
                }
            }
        }
    }

    #[test]
    fn edge_density_matches_probability() {
        let d = 25;
        let pairs = (d * (d - 1) / 2) as f64;
        let mut densities = Vec::new();
        for seed in 0..100 {
            let truth = generate_precision(d, 0.1, 1000 + seed).unwrap();
            densities.push(truth.edge_count() as f64 / pairs);
        }
        let mean = densities.iter().sum::<f64>() / densities.len() as f64;
        assert!((mean - 0.1).abs() < 0.02, "mean density {mean}");
    }

    #[test]
    fn identity_precision_sampling_matches_identity_covariance() {
        let truth = generate_precision(4, 0.0, 9).unwrap();
        let x = sample_mvn(&truth, 100_000, 10);
        let s = covariance(&x).unwrap();
        let err = s.sub(&Matrix::identity(4)).frob_norm() / 4.0;
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let truth = generate_precision(5, 0.3, 11).unwrap();
        let a = sample_mvn(&truth, 50, 12);
        let b = sample_mvn(&truth, 50, 12);
        assert_eq!(a, b);
        let c = sample_mvn(&truth, 50, 13);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_precision_approaches_truth() {
        let truth = generate_precision(2, 1.0, 21).unwrap();
        let x = sample_mvn(&truth, 100_000, 22);
        let s = covariance(&x).unwrap();
        let empirical = spd_inverse_matrix(&s).unwrap();
        let scale = truth.precision.matrix().max_abs();
        for i in 0..2 {
            for j in 0..2 {
                let diff = (empirical.at(i, j) - truth.precision.matrix().at(i, j)).abs();
                assert!(diff < 0.05 * scale, "entry ({i},{j}) off by {diff}");
            }
        }
    }

    #[test]
    fn truth_doc_round_trip() {
        let truth = generate_precision(5, 0.4, 31).unwrap();
        let names = Dataset::default_names(5);
        let doc = truth.to_doc(&names);
        let text = serde_json::to_string(&doc).unwrap();
        let parsed: GroundTruthDoc = serde_json::from_str(&text).unwrap();
        let back = GroundTruth::from_doc(&parsed).unwrap();
        assert_eq!(back.precision.matrix(), truth.precision.matrix());
        assert_eq!(back.adjacency, truth.adjacency);
    }
}
