//! Classical comparator: the l1-penalized maximum-likelihood precision
//! estimate solved by the Alternating Direction Method of Multipliers, plus
//! a cross-validated penalty search.
//!
//! Objective: `min over SPD Theta of -log det Theta + tr(S Theta) +
//! rho * sum_{i != j} |Theta_ij|`. Convergence is declared on the KKT
//! residual of that objective, checked entrywise.

use crate::data::{covariance, DataError, Dataset};
use crate::glad::uglad_loss;
use crate::linalg::{cholesky_matrix, spd_inverse_matrix, sym_eig, LinalgError, Matrix};
use crate::rng;
use rand::seq::SliceRandom;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("ADMM did not reach the KKT tolerance within {0} iterations")]
    NoConvergence(usize),
    #[error("penalty grid is empty")]
    EmptyGrid,
    #[error("need at least {need} rows for {folds}-fold selection, got {got}")]
    TooFewRows { got: usize, need: usize, folds: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub const ADMM_DEFAULT_PENALTY: f64 = 1.0;
pub const ADMM_DEFAULT_ITERS: usize = 1000;
pub const ADMM_DEFAULT_TOL: f64 = 1e-6;

/// Entrywise KKT residual of the penalized objective at `theta`:
/// gradient of the smooth part is `G = S - Theta^{-1}`; diagonal entries
/// must have `G_ii = 0`, nonzero off-diagonals `G_ij + rho sign = 0`, zero
/// off-diagonals `|G_ij| <= rho`.
pub fn kkt_residual(theta: &Matrix, s: &Matrix, rho: f64) -> Result<f64, LinalgError> {
    let inv = spd_inverse_matrix(&theta.symmetrized())?;
    let d = theta.rows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let g = s.at(i, j) - inv.at(i, j);
            let r = if i == j {
                g.abs()
            } else {
                let t = theta.at(i, j);
                if t != 0.0 {
                    (g + rho * t.signum()).abs()
                } else {
                    (g.abs() - rho).max(0.0)
                }
            };
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Penalized objective value (off-diagonal l1).
pub fn glasso_objective(theta: &Matrix, s: &Matrix, rho: f64) -> Result<f64, LinalgError> {
    let base = uglad_loss(s, theta).map_err(|_| LinalgError::ShapeMismatch("objective".into()))?;
    let d = theta.rows();
    let mut l1 = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                l1 += theta.at(i, j).abs();
            }
        }
    }
    Ok(base + rho * l1)
}

/// ADMM solve of the graphical-lasso objective. Returns the sparse iterate
/// once its KKT residual is below `tol`.
pub fn admm_glasso(
    s: &Matrix,
    rho: f64,
    penalty: f64,
    iters: usize,
    tol: f64,
) -> Result<Matrix, BaselineError> {
    let (theta, _) = admm_glasso_with_history(s, rho, penalty, iters, tol, false)?;
    Ok(theta)
}

/// Same as [`admm_glasso`] but optionally records the objective value at the
/// SPD iterate of every iteration.
pub fn admm_glasso_with_history(
    s: &Matrix,
    rho: f64,
    penalty: f64,
    iters: usize,
    tol: f64,
    record_objective: bool,
) -> Result<(Matrix, Vec<f64>), BaselineError> {
    assert!(rho > 0.0, "l1 weight must be positive");
    assert!(penalty > 0.0, "ADMM penalty must be positive");
    let d = s.rows();
    let s = s.symmetrized();
    let mut z = Matrix::identity(d);
    let mut u = Matrix::zeros(d, d);
    let mut history = Vec::new();

    for _iter in 0..iters {
        // Theta step: eigendecompose beta (Z - U) - S and solve the scalar
        // quadratic beta t^2 - lambda_i t - 1 = 0 per eigenvalue.
        let mut q = z.sub(&u).scale(penalty).sub(&s);
        q = q.symmetrized();
        let (w, v) = sym_eig(&q)?;
        let mut scaled = v.clone();
        for (j, &wj) in w.iter().enumerate() {
            let t = (wj + (wj * wj + 4.0 * penalty).sqrt()) / (2.0 * penalty);
            for i in 0..d {
                scaled.set(i, j, scaled.at(i, j) * t);
            }
        }
        let theta = scaled.matmul(&v.transpose()).symmetrized();
        if record_objective {
            history.push(glasso_objective(&theta, &s, rho)?);
        }

        // Z step: off-diagonal soft threshold of Theta + U.
        let thresh = rho / penalty;
        let target = theta.add(&u);
        let mut z_next = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let x = target.at(i, j);
                let v = if i == j {
                    x
                } else {
                    x.signum() * (x.abs() - thresh).max(0.0)
                };
                z_next.set(i, j, v);
            }
        }
        z = z_next.symmetrized();

        // Dual update.
        u = u.add(&theta.sub(&z));

        // The sparse iterate satisfies the KKT system at convergence; only
        // test once it is positive definite and primal-feasible enough.
        if theta.sub(&z).frob_norm() <= tol * (1.0 + z.frob_norm())
            && cholesky_matrix(&z).is_ok()
        {
            let kkt = kkt_residual(&z, &s, rho)?;
            if kkt <= tol {
                return Ok((z, history));
            }
        }
    }
    Err(BaselineError::NoConvergence(iters))
}

/// Log-spaced penalty grid from `0.05 * rho_max` to `rho_max`, where
/// `rho_max` is the largest absolute off-diagonal covariance entry (the
/// smallest penalty that fully shrinks the estimate).
pub fn default_rho_grid(s: &Matrix, points: usize) -> Vec<f64> {
    let d = s.rows();
    let mut rho_max: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                rho_max = rho_max.max(s.at(i, j).abs());
            }
        }
    }
    if rho_max <= 0.0 {
        return vec![1e-3];
    }
    let lo = (0.05 * rho_max).ln();
    let hi = rho_max.ln();
    (0..points)
        .map(|k| {
            let t = if points == 1 {
                1.0
            } else {
                k as f64 / (points - 1) as f64
            };
            (lo + t * (hi - lo)).exp()
        })
        .collect()
}

/// Cross-validated penalty selection: each grid point is scored by the mean
/// held-out Gaussian log-likelihood over seeded folds, the best penalty is
/// refit on all rows. A single-element grid skips the fold loop entirely.
pub fn baseline_cv(
    x: &Dataset,
    rho_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Matrix, BaselineError> {
    if rho_grid.is_empty() {
        return Err(BaselineError::EmptyGrid);
    }
    let s_full = covariance(x)?;
    if rho_grid.len() == 1 {
        return admm_glasso(
            &s_full,
            rho_grid[0],
            ADMM_DEFAULT_PENALTY,
            ADMM_DEFAULT_ITERS,
            ADMM_DEFAULT_TOL,
        );
    }

    let m = x.n_samples();
    // Every fold needs >= 2 held-out rows and >= 2 training rows.
    let need = folds.max(2) * 2;
    if folds < 2 || m < need {
        return Err(BaselineError::TooFewRows {
            got: m,
            need,
            folds,
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::stream(seed, "baseline-folds"));

    let mut best: Option<(f64, f64)> = None; // (score, rho)
    for &rho in rho_grid {
        let mut score_sum = 0.0;
        for fold in 0..folds {
            let holdout: Vec<usize> = order
                .iter()
                .copied()
                .enumerate()
                .filter(|(i, _)| i % folds == fold)
                .map(|(_, r)| r)
                .collect();
            let train: Vec<usize> = order
                .iter()
                .copied()
                .enumerate()
                .filter(|(i, _)| i % folds != fold)
                .map(|(_, r)| r)
                .collect();
            let s_train = covariance(&x.select_rows(&train))?;
            let s_hold = covariance(&x.select_rows(&holdout))?;
            let theta = admm_glasso(
                &s_train,
                rho,
                ADMM_DEFAULT_PENALTY,
                ADMM_DEFAULT_ITERS,
                ADMM_DEFAULT_TOL,
            )?;
            // Held-out log-likelihood, larger is better.
            let ll = -uglad_loss(&s_hold, &theta)
                .map_err(|_| LinalgError::ShapeMismatch("cv score".into()))?;
            score_sum += ll;
        }
        let score = score_sum / folds as f64;
        let better = match best {
            None => true,
            Some((s, _)) => score > s,
        };
        if better {
            best = Some((score, rho));
        }
    }
    let (_, rho) = best.expect("grid checked non-empty");
    admm_glasso(
        &s_full,
        rho,
        ADMM_DEFAULT_PENALTY,
        ADMM_DEFAULT_ITERS,
        ADMM_DEFAULT_TOL,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::test_support::random_spd;
    use crate::synth::{generate_precision, sample_mvn};

    #[test]
    fn identity_covariance_returns_identity() {
        let s = Matrix::identity(5);
        for rho in [0.05, 0.5, 2.0] {
            let theta = admm_glasso(&s, rho, 1.0, 1000, 1e-8).unwrap();
            assert!(theta.max_abs_diff(&Matrix::identity(5)) < 1e-6, "rho {rho}");
        }
    }

    #[test]
    fn huge_penalty_gives_diagonal_estimate() {
        let s = random_spd(6, 30.0, 3).into_matrix();
        let theta = admm_glasso(&s, 100.0, 1.0, 1000, 1e-7).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    assert!((theta.at(i, i) - 1.0 / s.at(i, i)).abs() < 1e-6);
                } else {
                    assert_eq!(theta.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn kkt_residual_is_small_at_solution() {
        let s = random_spd(8, 50.0, 7).into_matrix();
        let rho = 0.1;
        let theta = admm_glasso(&s, rho, 1.0, 2000, 1e-7).unwrap();
        assert!(kkt_residual(&theta, &s, rho).unwrap() <= 1e-7);
        assert!(cholesky_matrix(&theta).is_ok());
    }

    #[test]
    fn objective_monotone_after_transient() {
        for seed in 0..5 {
            let s = random_spd(5, 20.0, 100 + seed).into_matrix();
            let (_, history) =
                admm_glasso_with_history(&s, 0.1, 1.0, 2000, 1e-7, true).unwrap();
            for w in history.windows(2).skip(5) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "seed {seed}: objective rose {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn scale_equivariance() {
        let s = random_spd(6, 40.0, 11).into_matrix();
        let rho = 0.2;
        let c = 3.0;
        let base = admm_glasso(&s, rho, 1.0, 4000, 1e-9).unwrap();
        let scaled = admm_glasso(&s.scale(c), rho * c, 1.0, 4000, 1e-9).unwrap();
        let rescaled = scaled.scale(c);
        assert!(base.max_abs_diff(&rescaled) < 1e-6);
    }

    #[test]
    fn single_grid_point_equals_direct_solve() {
        let truth = generate_precision(8, 0.2, 13).unwrap();
        let x = sample_mvn(&truth, 60, 14);
        let s = covariance(&x).unwrap();
        let via_cv = baseline_cv(&x, &[0.15], 5, 99).unwrap();
        let direct = admm_glasso(&s, 0.15, 1.0, 1000, 1e-6).unwrap();
        assert_eq!(via_cv, direct);
    }

    #[test]
    fn cv_prefers_moderate_penalty_on_structured_data() {
        let truth = generate_precision(10, 0.3, 17).unwrap();
        let x = sample_mvn(&truth, 400, 18);
        let s = covariance(&x).unwrap();
        let grid = default_rho_grid(&s, 6);
        let huge = *grid.last().unwrap() * 50.0;
        let moderate = grid[1];
        let chosen = baseline_cv(&x, &[moderate, huge], 4, 5).unwrap();
        // With the huge penalty the estimate would be diagonal; a moderate
        // penalty must win the held-out likelihood on structured data.
        let off_diag_mass: f64 = (0..10)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| chosen.at(i, j).abs())
            .sum();
        assert!(off_diag_mass > 0.0);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let truth = generate_precision(5, 0.2, 19).unwrap();
        let x = sample_mvn(&truth, 30, 20);
        assert!(matches!(
            baseline_cv(&x, &[], 3, 0),
            Err(BaselineError::EmptyGrid)
        ));
    }
}
