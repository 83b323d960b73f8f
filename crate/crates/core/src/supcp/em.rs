//! E-step, M-step updates and the sign/scale/order normalization.

use nalgebra::Cholesky;

use crate::cp_als::leading_sign;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, ols, psd_factor, right_solve_spd, symmetrize};
use crate::tensor::{hadamard_grams, mttkrp, vmat, LoadingSet, Matrix, MultiwayArray};

use super::likelihood::{check_shapes, Projections};
use super::{EStepResult, SupCpParams, SIGMA_E2_FLOOR};

/// Eigenvalue floor below which `Σ_f` is reported as degenerate.
const SIGMA_F_DEGENERATE: f64 = 1e-12;

/// Posterior mean and covariance of the latent scores.
///
/// `Σ̂_U = (Vmatᵀ Vmat / σ²_e + Σ_f⁻¹)⁻¹` and
/// `Û = (X⁽¹⁾ Vmat + σ²_e Y B Σ_f⁻¹)(Vmatᵀ Vmat + σ²_e Σ_f⁻¹)⁻¹`.
pub fn e_step(x: &MultiwayArray, y: &Matrix, params: &SupCpParams) -> Result<EStepResult> {
    params.validate()?;
    check_shapes(x, y, params)?;
    let proj = Projections::compute(x, params);
    let yb = y * &params.b;
    Ok(posterior(&proj, &yb, params)?.0)
}

/// Computes the posterior through `Σ_f = L Lᵀ` so a singular `Σ_f` needs no inverse:
/// `Σ̂_U = L (I + Lᵀ G L / σ²)⁻¹ Lᵀ`, `Û = Y B + (X⁽¹⁾Vmat − Y B G) Σ̂_U / σ²`.
/// The flag reports a (numerically) singular `Σ_f`.
pub(crate) fn posterior(
    proj: &Projections,
    yb: &Matrix,
    params: &SupCpParams,
) -> Result<(EStepResult, bool)> {
    let s2 = params.sigma_e2;
    let r = params.rank();
    let l = psd_factor(&params.sigma_f);
    let mut p_inv = l.transpose() * &proj.gram * &l / s2;
    for i in 0..r {
        p_inv[(i, i)] += 1.0;
    }
    symmetrize(&mut p_inv);
    let p = Cholesky::new(p_inv)
        .ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?
        .inverse();
    let mut sigma_u = &l * p * l.transpose();
    symmetrize(&mut sigma_u);
    let resid = &proj.xv - yb * &proj.gram;
    let u_hat = yb + resid * &sigma_u / s2;
    let degenerate = min_eigenvalue(&params.sigma_f) < SIGMA_F_DEGENERATE;
    Ok((EStepResult { u_hat, sigma_u }, degenerate))
}

/// `Ûᵀ Û + n Σ̂_U`, the expected score cross-product.
fn score_moment(e: &EStepResult) -> Matrix {
    let n = e.u_hat.nrows() as f64;
    let mut m = e.u_hat.transpose() * &e.u_hat + &e.sigma_u * n;
    symmetrize(&mut m);
    m
}

/// Loading update: for each mode `k` in ascending order (using the already
/// updated lower modes), `V_k = X⁽ᵏ⁾ W⁽ᵏ⁾ ((Vmat⁽ᵏ⁾ᵀ Vmat⁽ᵏ⁾) ∘ (ÛᵀÛ + nΣ̂_U))⁻¹`.
/// Columns are left unnormalized.
pub fn m_step_loadings(
    x: &MultiwayArray,
    e_step: &EStepResult,
    params: &SupCpParams,
) -> Result<LoadingSet> {
    Ok(update_loadings(x, e_step, &params.loadings)?.0)
}

pub(crate) fn update_loadings(
    x: &MultiwayArray,
    e: &EStepResult,
    loadings: &LoadingSet,
) -> Result<(LoadingSet, bool)> {
    let uu = score_moment(e);
    let mut factors = loadings.factors().to_vec();
    let mut jittered = false;
    for k in 0..factors.len() {
        let others: Vec<&Matrix> = std::iter::once(&e.u_hat)
            .chain(factors.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, f)| f))
            .collect();
        let rhs = mttkrp(x, k + 1, &others)?;
        let grams = hadamard_grams(
            factors.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, f)| f),
        );
        let h = if grams.nrows() == 0 {
            uu.clone()
        } else {
            grams.component_mul(&uu)
        };
        let (update, jit) = right_solve_spd(&rhs, &h)?;
        jittered |= jit;
        factors[k] = update;
    }
    Ok((LoadingSet::new(factors)?, jittered))
}

#[derive(Debug, Clone)]
pub struct RegressionUpdate {
    pub b: Matrix,
    pub sigma_f: Matrix,
    pub sigma_e2: f64,
    /// The noise variance hit [`SIGMA_E2_FLOOR`].
    pub floored: bool,
}

/// Closed-form updates of `B`, `Σ_f` and `σ²_e` given the posterior moments and
/// the (unnormalized) loadings from [`m_step_loadings`].
pub fn m_step_regression(
    x: &MultiwayArray,
    y: &Matrix,
    e_step: &EStepResult,
    loadings: &LoadingSet,
    diag_sigma_f: bool,
) -> Result<RegressionUpdate> {
    let proj = Projections {
        xv: x.sample_view() * vmat(loadings),
        gram: loadings.vmat_gram(),
    };
    let x_norm2 = x.values().iter().map(|v| v * v).sum::<f64>();
    regression_update(x.sample_size(), x_norm2, &proj, y, e_step, diag_sigma_f)
}

pub(crate) fn regression_update(
    d: usize,
    x_norm2: f64,
    proj: &Projections,
    y: &Matrix,
    e: &EStepResult,
    diag_sigma_f: bool,
) -> Result<RegressionUpdate> {
    let n = e.u_hat.nrows();
    let b = ols(y, &e.u_hat)?;
    let f = &e.u_hat - y * &b;
    let mut sigma_f = f.transpose() * &f / n as f64 + &e.sigma_u;
    symmetrize(&mut sigma_f);
    if diag_sigma_f {
        sigma_f = Matrix::from_diagonal(&sigma_f.diagonal());
    }
    let ess = x_norm2 - 2.0 * e.u_hat.dot(&proj.xv) + proj.gram.dot(&score_moment(e));
    let raw = ess / (n * d) as f64;
    let floored = !(raw > SIGMA_E2_FLOOR);
    Ok(RegressionUpdate {
        b,
        sigma_f,
        sigma_e2: if floored { SIGMA_E2_FLOOR } else { raw },
        floored,
    })
}

/// How normalization maps old matricized-loading columns onto new ones:
/// new column `r` is old column `order[r]` multiplied by `coef[order[r]]`.
pub(crate) struct ColumnMap {
    pub order: Vec<usize>,
    pub coef: Vec<f64>,
}

impl ColumnMap {
    pub fn apply_cols(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.nrows(), self.order.len(), |i, r| {
            let o = self.order[r];
            m[(i, o)] * self.coef[o]
        })
    }

    pub fn apply_gram(&self, g: &Matrix) -> Matrix {
        let r = self.order.len();
        Matrix::from_fn(r, r, |a, b| {
            let (oa, ob) = (self.order[a], self.order[b]);
            g[(oa, ob)] * self.coef[oa] * self.coef[ob]
        })
    }
}

/// Rescales every loading column to unit norm with a positive first nonzero
/// entry, moving scale and sign into `B` and `Σ_f` so the likelihood is
/// unchanged, then orders components by nonincreasing `diag(Σ_f)` (stable).
pub fn normalize(params: SupCpParams) -> Result<SupCpParams> {
    Ok(normalize_mapped(params)?.0)
}

pub(crate) fn normalize_mapped(params: SupCpParams) -> Result<(SupCpParams, ColumnMap)> {
    let r = params.rank();
    let mut factors = params.loadings.into_factors();
    let mut scale = vec![1.0; r];
    let mut sign = vec![1.0; r];
    for (k, f) in factors.iter_mut().enumerate() {
        for c in 0..r {
            let norm = f.column(c).norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateComponent { mode: k, component: c });
            }
            let s = leading_sign(f.column(c).iter());
            f.column_mut(c).scale_mut(s / norm);
            scale[c] *= norm;
            sign[c] *= s;
        }
    }
    let mult: Vec<f64> = scale.iter().zip(&sign).map(|(a, s)| a * s).collect();
    let mut b = params.b;
    for (c, m) in mult.iter().enumerate() {
        b.column_mut(c).scale_mut(*m);
    }
    let mut sigma_f = Matrix::from_fn(r, r, |i, j| params.sigma_f[(i, j)] * mult[i] * mult[j]);
    if params.diag_constraint {
        sigma_f = Matrix::from_diagonal(&sigma_f.diagonal());
    }

    let diag: Vec<f64> = sigma_f.diagonal().iter().copied().collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &c| diag[c].total_cmp(&diag[a]));
    let factors: Vec<Matrix> = factors.iter().map(|f| f.select_columns(order.iter())).collect();
    let b = b.select_columns(order.iter());
    let sigma_f = Matrix::from_fn(r, r, |i, j| sigma_f[(order[i], order[j])]);
    let coef = mult.iter().map(|m| 1.0 / m).collect();
    Ok((
        SupCpParams {
            loadings: LoadingSet::new(factors)?,
            b,
            sigma_f,
            sigma_e2: params.sigma_e2,
            diag_constraint: params.diag_constraint,
        },
        ColumnMap { order, coef },
    ))
}
