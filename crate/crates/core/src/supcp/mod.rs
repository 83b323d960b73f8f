//! The supervised CP model `X = ⟦U, V_1, …, V_K⟧ + E`, `U = Y B + F`.
//!
//! Data arrays are `n × d_1 × … × d_K` with samples in mode 0; covariates are
//! an `n × q` matrix. Parameters follow two identifiability normalizations:
//! every loading column has unit norm with a positive first nonzero entry, and
//! components are ordered by nonincreasing diagonal of `Σ_f`.

mod em;
mod fit;
mod identifiability;
mod likelihood;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{cp_compose, LoadingSet, Matrix, MultiwayArray};

pub use em::{e_step, m_step_loadings, m_step_regression, normalize, RegressionUpdate};
pub use fit::{fit, fit_multistart, initialize, InitState};
pub use identifiability::{identifiability_check, IdentifiabilityReport};
pub use likelihood::marginal_loglik;

/// Floor applied to the noise variance after each M-step.
pub const SIGMA_E2_FLOOR: f64 = 1e-12;

/// Eigenvalue slack tolerated when checking that `Σ_f` is positive semidefinite.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SupCpParams {
    pub loadings: LoadingSet,
    /// Regression coefficients, `q × R`.
    pub b: Matrix,
    /// Residual score covariance, `R × R`.
    pub sigma_f: Matrix,
    pub sigma_e2: f64,
    pub diag_constraint: bool,
}

impl SupCpParams {
    pub fn rank(&self) -> usize {
        self.loadings.rank()
    }

    pub fn n_covariates(&self) -> usize {
        self.b.nrows()
    }

    /// Product of the loading dimensions.
    pub fn sample_size(&self) -> usize {
        self.loadings.dims().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank();
        if self.b.ncols() != r {
            return Err(Error::InvalidParameter(format!(
                "B has {} columns, expected {r}",
                self.b.ncols()
            )));
        }
        if self.sigma_f.nrows() != r || self.sigma_f.ncols() != r {
            return Err(Error::InvalidParameter(format!(
                "Σ_f is {}×{}, expected {r}×{r}",
                self.sigma_f.nrows(),
                self.sigma_f.ncols()
            )));
        }
        if !(self.sigma_e2 > 0.0 && self.sigma_e2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "σ²_e must be positive and finite, got {}",
                self.sigma_e2
            )));
        }
        if self.b.iter().chain(self.sigma_f.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite entry in B or Σ_f".into()));
        }
        let asym = (&self.sigma_f - self.sigma_f.transpose()).abs().max();
        if asym > 1e-8 * (1.0 + self.sigma_f.abs().max()) {
            return Err(Error::InvalidParameter("Σ_f is not symmetric".into()));
        }
        let min_eig = crate::linalg::min_eigenvalue(&self.sigma_f);
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidParameter(format!(
                "Σ_f is not positive semidefinite (eigenvalue {min_eig})"
            )));
        }
        Ok(())
    }

    /// Unit-norm, sign-fixed loadings and nonincreasing `diag(Σ_f)`.
    pub fn satisfies_restrictions(&self, tol: f64) -> bool {
        let diag = self.sigma_f.diagonal();
        self.loadings.is_normalized(tol) && diag.as_slice().windows(2).all(|w| w[0] >= w[1])
    }
}

/// Posterior moments of the latent scores given the data.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepResult {
    /// Posterior means, `n × R`.
    pub u_hat: Matrix,
    /// Posterior covariance shared by all samples, `R × R`.
    pub sigma_u: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Random,
    Cp,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "cp" => Ok(Self::Cp),
            other => invalid(format!("unknown init method {other:?} (expected random or cp)")),
        }
    }
}

impl std::fmt::Display for InitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Cp => "cp",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Relative change in log-likelihood below which the fit has converged.
    pub tol: f64,
    /// Number of initial iterations with decaying noise added to the posterior scores.
    pub anneal_iters: usize,
    pub init_method: InitMethod,
    pub seed: u64,
    pub diag_sigma_f: bool,
    /// Hold `Σ_f` at this value (in normalized coordinates) instead of estimating it.
    pub fixed_sigma_f: Option<Matrix>,
}

impl FitConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            max_iters: 1000,
            tol: 1e-8,
            anneal_iters: 100,
            init_method: InitMethod::Random,
            seed: 0,
            diag_sigma_f: true,
            fixed_sigma_f: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return invalid("rank must be at least 1");
        }
        if !(self.tol > 0.0) {
            return invalid("tolerance must be positive");
        }
        if self.anneal_iters >= self.max_iters {
            return invalid(format!(
                "annealing iterations ({}) must be fewer than max iterations ({})",
                self.anneal_iters, self.max_iters
            ));
        }
        if let Some(s) = &self.fixed_sigma_f {
            if s.nrows() != self.rank || s.ncols() != self.rank {
                return invalid("fixed Σ_f must be R × R");
            }
        }
        Ok(())
    }
}

/// Per-feature and per-covariate sample means removed before fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Centering {
    /// Mean of each of the `d` features, mode-1-fastest order.
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
}

impl Centering {
    pub fn from_data(x: &MultiwayArray, y: &Matrix) -> Self {
        let xm = x.sample_view();
        let n = xm.nrows() as f64;
        let x_mean = xm.column_iter().map(|c| c.sum() / n).collect();
        let y_mean = y.column_iter().map(|c| c.sum() / y.nrows() as f64).collect();
        Self { x_mean, y_mean }
    }

    pub fn none(d: usize, q: usize) -> Self {
        Self {
            x_mean: vec![0.0; d],
            y_mean: vec![0.0; q],
        }
    }

    pub fn apply(&self, x: &MultiwayArray, y: &Matrix) -> Result<(MultiwayArray, Matrix)> {
        if x.sample_size() != self.x_mean.len() || y.ncols() != self.y_mean.len() {
            return invalid(format!(
                "centering expects {} features and {} covariates, got {} and {}",
                self.x_mean.len(),
                self.y_mean.len(),
                x.sample_size(),
                y.ncols()
            ));
        }
        let mut xc = x.sample_matrix();
        for (j, mut c) in xc.column_iter_mut().enumerate() {
            c.add_scalar_mut(-self.x_mean[j]);
        }
        let mut yc = y.clone();
        for (j, mut c) in yc.column_iter_mut().enumerate() {
            c.add_scalar_mut(-self.y_mean[j]);
        }
        Ok((MultiwayArray::from_sample_matrix(&xc, &x.dims()[1..])?, yc))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: SupCpParams,
    /// Posterior moments at the final parameters.
    pub e_step: EStepResult,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iters: usize,
    pub centering: Centering,
    pub seed: u64,
    pub diagnostics: Vec<String>,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Estimated low-rank signal in the original (uncentered) coordinates.
    ///
    /// The feature means removed before fitting are projected onto the span of
    /// the matricized loadings and added back to every sample's scores, so the
    /// estimate stays rank `R` and excludes the noise part of the means.
    pub fn fitted_signal(&self) -> Result<MultiwayArray> {
        let vm = crate::tensor::vmat(&self.params.loadings);
        let gram = self.params.loadings.vmat_gram();
        let mean = nalgebra::DVector::from_column_slice(&self.centering.x_mean);
        let proj = vm.transpose() * mean;
        let (coef, _) =
            crate::linalg::right_solve_spd(&Matrix::from_column_slice(1, proj.len(), proj.as_slice()), &gram)?;
        let mut u = self.e_step.u_hat.clone();
        for mut row in u.row_iter_mut() {
            row += &coef;
        }
        cp_compose(&u, &self.params.loadings)
    }
}

/// The conditional mean of a centered sample with covariates `y_new`:
/// `⟦y_newᵀ B, V_1, …, V_K⟧` as a `1 × d_1 × … × d_K` array.
pub fn conditional_mean(y_new: &[f64], params: &SupCpParams) -> Result<MultiwayArray> {
    if y_new.len() != params.n_covariates() {
        return invalid(format!(
            "expected {} covariate values, got {}",
            params.n_covariates(),
            y_new.len()
        ));
    }
    let y = Matrix::from_row_slice(1, y_new.len(), y_new);
    cp_compose(&(y * &params.b), &params.loadings)
}
