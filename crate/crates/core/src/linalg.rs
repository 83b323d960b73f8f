//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relative jitter added to an ill-conditioned SPD system before retrying.
pub const JITTER: f64 = 1e-12;

pub(crate) fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Cholesky of a symmetric matrix, adding `JITTER · trace` (growing tenfold)
/// to the diagonal until it succeeds. Returns the factor and whether jitter was used.
pub(crate) fn cholesky_jittered(a: &Matrix) -> Result<(Cholesky<f64, nalgebra::Dyn>, bool)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, false));
    }
    let n = a.nrows();
    let trace = a.trace().abs().max(f64::MIN_POSITIVE);
    let mut eps = JITTER * trace / n.max(1) as f64;
    for _ in 0..8 {
        let shifted = a + Matrix::identity(n, n) * eps;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, true));
        }
        eps *= 10.0;
    }
    Err(Error::Singular(format!(
        "{n}×{n} system is not positive definite even with jitter"
    )))
}

/// Solves `X · A = B` for symmetric positive (semi)definite `A`.
pub(crate) fn right_solve_spd(b: &Matrix, a: &Matrix) -> Result<(Matrix, bool)> {
    let (chol, jittered) = cholesky_jittered(a)?;
    let xt = chol.solve(&b.transpose());
    Ok((xt.transpose(), jittered))
}

/// A factor `L` with `L Lᵀ = S` for symmetric PSD `S`; negative eigenvalues are clamped.
pub(crate) fn psd_factor(s: &Matrix) -> Matrix {
    let n = s.nrows();
    let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || s[(i, j)] == 0.0));
    if is_diag {
        return Matrix::from_diagonal(&s.diagonal().map(|v| v.max(0.0).sqrt()));
    }
    let eig = SymmetricEigen::new(s.clone());
    let mut l = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let w = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(w);
    }
    l
}

pub(crate) fn min_eigenvalue(s: &Matrix) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(s.clone()).eigenvalues.min()
}

/// Ordinary least squares `(YᵀY)⁻¹ Yᵀ U`. An all-zero (or empty) design yields zero coefficients.
pub(crate) fn ols(y: &Matrix, u: &Matrix) -> Result<Matrix> {
    let q = y.ncols();
    if q == 0 || y.iter().all(|v| *v == 0.0) {
        return Ok(Matrix::zeros(q, u.ncols()));
    }
    let yty = y.transpose() * y;
    let sv = yty.clone().singular_values();
    if sv.min() <= 1e-12 * sv.max() {
        return Err(Error::Singular(
            "covariate matrix is not of full column rank; remove collinear covariates".into(),
        ));
    }
    let chol = Cholesky::new(yty).ok_or_else(|| {
        Error::Singular(
            "covariate matrix is not of full column rank; remove collinear covariates".into(),
        )
    })?;
    Ok(chol.solve(&(y.transpose() * u)))
}

pub(crate) fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    // column-major fill order keeps draws reproducible independent of nalgebra internals
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, values)
}

pub(crate) fn normalize_columns(m: &mut Matrix) -> Vec<f64> {
    m.column_iter_mut()
        .map(|mut c| {
            let n = c.norm();
            if n > 0.0 {
                c /= n;
            }
            n
        })
        .collect()
}

/// Orthonormal basis of the column space (left singular vectors above `RANK_RTOL·σ_max`).
pub(crate) fn column_space(m: &Matrix) -> Matrix {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| smax > 0.0 && s > crate::tensor::RANK_RTOL * smax)
        .map(|(i, _)| i)
        .collect();
    u.select_columns(keep.iter())
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// SplitMix64 step, used to derive independent per-task seeds from one base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
