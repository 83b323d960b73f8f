use nalgebra::Cholesky;

use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_factor, symmetrize};
use crate::tensor::{vmat, Matrix, MultiwayArray};

use super::SupCpParams;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Data summaries sufficient for the likelihood and the E-step.
pub(crate) struct Projections {
    /// `X⁽¹⁾ · Vmat`, `n × R`.
    pub xv: Matrix,
    /// `Vmatᵀ · Vmat`.
    pub gram: Matrix,
}

impl Projections {
    pub fn compute(x: &MultiwayArray, params: &SupCpParams) -> Self {
        let vm = vmat(&params.loadings);
        Self {
            xv: x.sample_view() * vm,
            gram: params.loadings.vmat_gram(),
        }
    }
}

pub(crate) fn check_shapes(x: &MultiwayArray, y: &Matrix, params: &SupCpParams) -> Result<()> {
    let dims = params.loadings.dims();
    if x.order() != dims.len() + 1 || x.dims()[1..] != dims[..] {
        return invalid(format!(
            "data dims {:?} do not match loading dims {dims:?}",
            x.dims()
        ));
    }
    if y.nrows() != x.dims()[0] {
        return invalid(format!(
            "covariates have {} rows but data has {} samples",
            y.nrows(),
            x.dims()[0]
        ));
    }
    if y.ncols() != params.n_covariates() {
        return invalid(format!(
            "covariates have {} columns but B has {} rows",
            y.ncols(),
            params.n_covariates()
        ));
    }
    Ok(())
}

/// Exact Gaussian log-density of the rows of `X⁽¹⁾`, each
/// `N(y_iᵀ B Vmatᵀ, Vmat Σ_f Vmatᵀ + σ²_e I_d)`.
///
/// Evaluated through a factor `Σ_f = L Lᵀ`, the Woodbury identity and the
/// matrix determinant lemma; cost is `O(n d R + R³)`.
pub fn marginal_loglik(x: &MultiwayArray, y: &Matrix, params: &SupCpParams) -> Result<f64> {
    params.validate()?;
    check_shapes(x, y, params)?;
    let proj = Projections::compute(x, params);
    let x_norm2 = x.values().iter().map(|v| v * v).sum::<f64>();
    let yb = y * &params.b;
    loglik_from_parts(x.dims()[0], x.sample_size(), x_norm2, &proj, &yb, params)
}

pub(crate) fn loglik_from_parts(
    n: usize,
    d: usize,
    x_norm2: f64,
    proj: &Projections,
    yb: &Matrix,
    params: &SupCpParams,
) -> Result<f64> {
    let s2 = params.sigma_e2;
    let r = params.rank();
    let l = psd_factor(&params.sigma_f);
    let gl = &proj.gram * &l;
    let mut m = l.transpose() * &gl;
    for i in 0..r {
        m[(i, i)] += s2;
    }
    symmetrize(&mut m);
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::Singular("marginal covariance factor is not positive definite".into()))?;
    let logdet_m: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let logdet = (d as f64 - r as f64) * s2.ln() + logdet_m;

    let ybg = yb * &proj.gram;
    let rss = x_norm2 - 2.0 * yb.dot(&proj.xv) + ybg.dot(yb);
    let resid_a = (&proj.xv - &ybg) * &l;
    let s = resid_a.transpose() * &resid_a;
    let correction = chol.solve(&s).trace();
    let quad = (rss - correction) / s2;

    Ok(-0.5 * (n * d) as f64 * LN_2PI - 0.5 * n as f64 * logdet - 0.5 * quad)
}
