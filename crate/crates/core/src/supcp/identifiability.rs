use crate::error::{invalid, Result};
use crate::tensor::{k_rank, numerical_rank, Matrix, K_RANK_MAX_COLS};

use super::SupCpParams;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifiabilityReport {
    pub satisfied: bool,
    /// `kr(Y B) + Σ_k kr(V_k) − (2R + K)`.
    pub margin: i64,
    pub kr_yb: usize,
    pub kr_loadings: Vec<usize>,
    pub y_full_column_rank: bool,
}

/// Checks the sufficient k-rank condition `kr(YB) + Σ_k kr(V_k) ≥ 2R + K`
/// together with full column rank of `Y`. Failure does not imply the model is
/// unidentifiable.
pub fn identifiability_check(params: &SupCpParams, y: &Matrix) -> Result<IdentifiabilityReport> {
    let r = params.rank();
    if r > K_RANK_MAX_COLS {
        return invalid(format!("identifiability check is limited to rank {K_RANK_MAX_COLS}"));
    }
    if y.ncols() != params.n_covariates() {
        return invalid("covariate count does not match B");
    }
    let yb = y * &params.b;
    let kr_yb = k_rank(&yb)?;
    let kr_loadings = params
        .loadings
        .factors()
        .iter()
        .map(k_rank)
        .collect::<Result<Vec<_>>>()?;
    let k = kr_loadings.len();
    let margin = (kr_yb + kr_loadings.iter().sum::<usize>()) as i64 - (2 * r + k) as i64;
    let y_full_column_rank = if y.ncols() == 0 {
        true
    } else {
        let smax = y.clone().singular_values().max();
        numerical_rank(y, smax) == y.ncols()
    };
    Ok(IdentifiabilityReport {
        satisfied: margin >= 0 && y_full_column_rank,
        margin,
        kr_yb,
        kr_loadings,
        y_full_column_rank,
    })
}
