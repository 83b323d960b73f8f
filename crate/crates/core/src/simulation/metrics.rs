use crate::error::{invalid, Result};
use crate::linalg::{column_space, median};
use crate::supcp::{normalize, SupCpParams};
use crate::tensor::{frobenius_distance, vmat, Matrix, MultiwayArray};

use super::SimTruth;

/// Signal error: Frobenius distance between estimated and true signal arrays.
pub fn signal_error(estimate: &MultiwayArray, truth: &MultiwayArray) -> Result<f64> {
    frobenius_distance(estimate, truth)
}

/// Largest principal angle, in degrees, between the column spans of `v` and
/// `v_hat` (numerical column spaces at relative tolerance 1e-10).
pub fn principal_angle(v: &Matrix, v_hat: &Matrix) -> Result<f64> {
    if v.nrows() != v_hat.nrows() {
        return invalid(format!(
            "row counts differ: {} vs {}",
            v.nrows(),
            v_hat.nrows()
        ));
    }
    let qa = column_space(v);
    let qb = column_space(v_hat);
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return invalid("principal angle of a zero matrix is undefined");
    }
    let s = (qa.transpose() * qb).singular_values();
    let smin = s.min().clamp(0.0, 1.0);
    Ok(smin.acos().to_degrees())
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&mut dev)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeErrors {
    /// `|σ²_e − σ̂²_e| / σ²_e`.
    pub re_e: f64,
    /// Mean of `|Σ_f[r,r] − Σ̂_f[r,r]| / Σ_f[r,r]`; `None` if any true diagonal entry is zero.
    pub re_f: Option<f64>,
    /// `‖B − B̂‖_F` after component alignment.
    pub b_error: f64,
}

/// Parameter recovery errors. Both parameter sets are normalized, then each true
/// component is greedily matched to the unused estimated component with the
/// largest absolute cosine between matricized loading columns, and estimated
/// `B` columns take the sign of that cosine.
///
/// The estimate may use a different mode structure from the truth (for example
/// a single matricized mode) as long as its matricized loadings have the same
/// number of rows.
pub fn relative_errors(estimate: &SupCpParams, truth: &SimTruth) -> Result<RelativeErrors> {
    let t = normalize(truth.params())?;
    let e = normalize(estimate.clone())?;
    let r = t.rank();
    if e.rank() != r || e.n_covariates() != t.n_covariates() {
        return invalid(format!(
            "estimate has rank {} and {} covariates, truth has {r} and {}",
            e.rank(),
            e.n_covariates(),
            t.n_covariates()
        ));
    }
    let vt = vmat(&t.loadings);
    let ve = vmat(&e.loadings);
    if vt.nrows() != ve.nrows() {
        return invalid("estimated and true loadings cover different feature counts");
    }
    let cos = vt.transpose() * &ve;
    let mut t_used = vec![false; r];
    let mut e_used = vec![false; r];
    let mut matched = vec![(0usize, 1.0f64); r];
    for _ in 0..r {
        let mut best = (0, 0, -1.0);
        for i in (0..r).filter(|&i| !t_used[i]) {
            for j in (0..r).filter(|&j| !e_used[j]) {
                let c = cos[(i, j)].abs();
                if c > best.2 {
                    best = (i, j, c);
                }
            }
        }
        let (i, j, _) = best;
        t_used[i] = true;
        e_used[j] = true;
        matched[i] = (j, if cos[(i, j)] < 0.0 { -1.0 } else { 1.0 });
    }

    let b_aligned = Matrix::from_fn(t.b.nrows(), r, |row, i| {
        let (j, s) = matched[i];
        s * e.b[(row, j)]
    });
    let b_error = (&t.b - b_aligned).norm();
    let re_e = (t.sigma_e2 - e.sigma_e2).abs() / t.sigma_e2;
    let td = t.sigma_f.diagonal();
    let re_f = if td.iter().any(|v| *v == 0.0) {
        None
    } else {
        let total: f64 = (0..r)
            .map(|i| (td[i] - e.sigma_f[(matched[i].0, matched[i].0)]).abs() / td[i])
            .sum();
        Some(total / r as f64)
    };
    Ok(RelativeErrors { re_e, re_f, b_error })
}
