//! Synthetic data generators, recovery metrics and benchmark runners.

mod benchmark;
mod metrics;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{normalize_columns, standard_normal_matrix};
use crate::supcp::SupCpParams;
use crate::tensor::{cp_compose, LoadingSet, Matrix, MultiwayArray};

pub use benchmark::{
    run_benchmark, run_init_study, BenchmarkConfig, BenchmarkReport, BenchmarkRow, FitTiming,
    InitStudyConfig, InitStudyRow, InitVariant, Method, MethodFailures,
};
pub use metrics::{mad, principal_angle, relative_errors, signal_error, RelativeErrors};

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// Latent scores `U = Y B + F`.
    pub u: Matrix,
    pub loadings: LoadingSet,
    pub b: Matrix,
    pub sigma_f: Matrix,
    pub sigma_e2: f64,
    /// `⟦U, V_1, …, V_K⟧`.
    pub signal: MultiwayArray,
    pub y: Matrix,
}

impl SimTruth {
    pub fn params(&self) -> SupCpParams {
        SupCpParams {
            loadings: self.loadings.clone(),
            b: self.b.clone(),
            sigma_f: self.sigma_f.clone(),
            sigma_e2: self.sigma_e2,
            diag_constraint: true,
        }
    }
}

/// A simulated dataset.
#[derive(Debug, Clone)]
pub struct SimData {
    pub x: MultiwayArray,
    pub y: Matrix,
    pub truth: SimTruth,
}

/// The generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Settings 1 to 4 of the comparison study.
    Setting(u8),
    /// Rank-selection data with the given true rank.
    Rank(usize),
    /// The 4-way initialization-study data.
    Init,
}

impl std::str::FromStr for Scheme {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("setting") {
            match k.parse::<u8>() {
                Ok(k @ 1..=4) => return Ok(Self::Setting(k)),
                _ => return invalid(format!("unknown setting {s:?} (expected setting1..setting4)")),
            }
        }
        if let Some(r) = s.strip_prefix("rank:") {
            return r
                .parse()
                .map(Self::Rank)
                .or_else(|_| invalid(format!("bad rank in scheme {s:?}")));
        }
        if s == "init" {
            return Ok(Self::Init);
        }
        invalid(format!("unknown scheme {s:?} (expected settingK, rank:<R> or init)"))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Setting(k) => write!(f, "setting{k}"),
            Self::Rank(r) => write!(f, "rank:{r}"),
            Self::Init => f.write_str("init"),
        }
    }
}

/// Which generator produced a dataset, recorded next to simulated files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeInfo {
    pub scheme: String,
    pub seed: u64,
}

pub fn generate(scheme: Scheme, seed: u64) -> Result<SimData> {
    match scheme {
        Scheme::Setting(k) => generate_setting(k, seed),
        Scheme::Rank(r) => generate_rank_sim(r, seed),
        Scheme::Init => generate_init_sim(seed),
    }
}

const N: usize = 100;
const Q: usize = 10;
const R: usize = 5;

/// `d × r` with orthonormal columns: left singular vectors of a Gaussian matrix.
fn orthonormal<G: Rng>(d: usize, r: usize, rng: &mut G) -> Matrix {
    let g = standard_normal_matrix(d, r, rng);
    g.svd(true, false).u.expect("requested U")
}

/// Unit-norm columns sharing one direction: `0.95 c + √(1 − 0.95²) z_r` with
/// `c, z_1, …, z_r` orthonormal, so all pairwise inner products equal 0.9025.
fn collinear<G: Rng>(d: usize, r: usize, rng: &mut G) -> Matrix {
    let basis = orthonormal(d, r + 1, rng);
    let w = (1.0 - 0.95f64 * 0.95).sqrt();
    Matrix::from_fn(d, r, |i, j| 0.95 * basis[(i, 0)] + w * basis[(i, j + 1)])
}

fn diag(values: &[f64]) -> Matrix {
    Matrix::from_diagonal(&DVector::from_column_slice(values))
}

/// Rows `N(0, Σ_f)` for diagonal `Σ_f`.
fn factor_residuals<G: Rng>(n: usize, sigma_f: &Matrix, rng: &mut G) -> Matrix {
    let sd = sigma_f.diagonal().map(f64::sqrt);
    let mut f = standard_normal_matrix(n, sigma_f.nrows(), rng);
    for (j, mut c) in f.column_iter_mut().enumerate() {
        c *= sd[j];
    }
    f
}

fn add_noise<G: Rng>(signal: &MultiwayArray, sigma_e2: f64, rng: &mut G) -> Result<MultiwayArray> {
    let sd = sigma_e2.sqrt();
    let values = signal
        .values()
        .iter()
        .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    MultiwayArray::new(signal.dims().to_vec(), values)
}

fn assemble<G: Rng>(
    y: Matrix,
    b: Matrix,
    f: Matrix,
    sigma_f: Matrix,
    loadings: LoadingSet,
    sigma_e2: f64,
    rng: &mut G,
) -> Result<SimData> {
    let u = &y * &b + f;
    let signal = cp_compose(&u, &loadings)?;
    let x = add_noise(&signal, sigma_e2, rng)?;
    Ok(SimData {
        x,
        y: y.clone(),
        truth: SimTruth { u, loadings, b, sigma_f, sigma_e2, signal, y },
    })
}

/// Settings 1 to 4 (`n = 100`, `q = 10`, `R = 5`, `Y` iid standard normal):
///
/// 1. `B = 0`, `10 × 10` orthonormal loadings, `Σ_f = diag(100, 64, 36, 16, 4)`, `σ²_e = 1`;
/// 2. random `B`, highly collinear `10 × 10` loadings, `Σ_f = diag(25, 16, 9, 4, 1)`, `σ²_e = 1`;
/// 3. `B` as in 2, orthonormal `10 × 10` loadings, `Σ_f = 0`, `σ²_e = 6`;
/// 4. `B` and `Σ_f` as in 2, orthonormal `50 × 50` loadings, `σ²_e = 0.5`.
///
/// A random `B` has iid normal entries rescaled so `‖Y B‖²_F = n · tr(diag(25, 16, 9, 4, 1))`,
/// the expected `‖F‖²_F` of setting 2.
pub fn generate_setting(setting: u8, seed: u64) -> Result<SimData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, sigma_f, sigma_e2) = match setting {
        1 => (10, diag(&[100.0, 64.0, 36.0, 16.0, 4.0]), 1.0),
        2 => (10, diag(&[25.0, 16.0, 9.0, 4.0, 1.0]), 1.0),
        3 => (10, Matrix::zeros(R, R), 6.0),
        4 => (50, diag(&[25.0, 16.0, 9.0, 4.0, 1.0]), 0.5),
        _ => return invalid(format!("setting must be 1..4, got {setting}")),
    };
    let y = standard_normal_matrix(N, Q, &mut rng);
    let b = if setting == 1 {
        Matrix::zeros(Q, R)
    } else {
        let raw = standard_normal_matrix(Q, R, &mut rng);
        let target = (N as f64 * 55.0).sqrt();
        let norm = (&y * &raw).norm();
        raw * (target / norm)
    };
    let f = factor_residuals(N, &sigma_f, &mut rng);
    let factors = (0..2)
        .map(|_| {
            if setting == 2 {
                collinear(d, R, &mut rng)
            } else {
                orthonormal(d, R, &mut rng)
            }
        })
        .collect();
    assemble(y, b, f, sigma_f, LoadingSet::new(factors)?, sigma_e2, &mut rng)
}

/// Rank-selection data: `n = 100`, `25 × 25` orthonormal loadings, `Y: 100 × 10`
/// and `B: 10 × R` iid standard normal, `diag(Σ_f)` iid Uniform(5, 25), `σ²_e = 1`.
pub fn generate_rank_sim(rank: usize, seed: u64) -> Result<SimData> {
    if !(1..=10).contains(&rank) {
        return invalid(format!("true rank must be in 1..=10, got {rank}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = standard_normal_matrix(N, Q, &mut rng);
    let b = standard_normal_matrix(Q, rank, &mut rng);
    let variances: Vec<f64> = (0..rank).map(|_| rng.random_range(5.0..25.0)).collect();
    let sigma_f = diag(&variances);
    let f = factor_residuals(N, &sigma_f, &mut rng);
    let factors = (0..2).map(|_| orthonormal(25, rank, &mut rng)).collect();
    assemble(y, b, f, sigma_f, LoadingSet::new(factors)?, 1.0, &mut rng)
}

/// Initialization-study data: a `10 × 20 × 40 × 50` array of rank 2. Score
/// column `r` is iid `N(0, s_r)` with `s_r ~ Uniform(2, 22)`, the single
/// covariate is `y = u_1 − f` with standard normal `f`, loadings are Gaussian
/// with unit-norm columns and the noise is standard normal.
///
/// The recorded truth is the implied regression of `U` on `y`:
/// `B = (s_1 / (s_1 + 1), 0)` and `Σ_f = diag(s_1 / (s_1 + 1), s_2)`.
pub fn generate_init_sim(seed: u64) -> Result<SimData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 10;
    let s: Vec<f64> = (0..2).map(|_| rng.random_range(2.0..22.0)).collect();
    let mut u = standard_normal_matrix(n, 2, &mut rng);
    for (j, mut c) in u.column_iter_mut().enumerate() {
        c *= s[j].sqrt();
    }
    let f = standard_normal_matrix(n, 1, &mut rng);
    let y = Matrix::from_fn(n, 1, |i, _| u[(i, 0)] - f[(i, 0)]);
    let factors = [20, 40, 50]
        .iter()
        .map(|&d| {
            let mut m = standard_normal_matrix(d, 2, &mut rng);
            normalize_columns(&mut m);
            m
        })
        .collect();
    let loadings = LoadingSet::new(factors)?;
    let shrink = s[0] / (s[0] + 1.0);
    let signal = cp_compose(&u, &loadings)?;
    let x = add_noise(&signal, 1.0, &mut rng)?;
    Ok(SimData {
        x,
        y: y.clone(),
        truth: SimTruth {
            u,
            loadings,
            b: Matrix::from_row_slice(1, 2, &[shrink, 0.0]),
            sigma_f: diag(&[shrink, s[1]]),
            sigma_e2: 1.0,
            signal,
            y,
        },
    })
}
