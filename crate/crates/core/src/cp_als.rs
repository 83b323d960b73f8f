//! Least-squares CP factorization by alternating least squares.
//!
//! Used as the unsupervised baseline and as an optional initializer for the
//! supervised EM fit. The first mode is treated as the sample mode: component
//! scales are absorbed into its factor `u` and the remaining factors are
//! returned with unit-norm columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::linalg::{normalize_columns, right_solve_spd, standard_normal_matrix};
use crate::tensor::{hadamard_grams, mttkrp, LoadingSet, Matrix, MultiwayArray};

#[derive(Debug, Clone)]
pub struct CpConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop once the relative decrease of the residual sum of squares falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl CpConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            max_iters: 500,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CpFit {
    /// Sample weights, `n × R`, with component scales absorbed.
    pub u: Matrix,
    pub loadings: LoadingSet,
    pub rss: f64,
    /// Residual sum of squares after each sweep.
    pub rss_trace: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
    pub diagnostics: Vec<String>,
}

impl CpFit {
    pub fn signal(&self) -> Result<MultiwayArray> {
        crate::tensor::cp_compose(&self.u, &self.loadings)
    }
}

/// Sign of the first nonzero entry (1 for an all-zero column).
pub(crate) fn leading_sign<'a>(col: impl IntoIterator<Item = &'a f64>) -> f64 {
    col.into_iter()
        .copied()
        .find(|v| *v != 0.0)
        .map_or(1.0, |v| v.signum())
}

/// Residual sum of squares of `x` against `⟦u, loadings⟧`.
pub(crate) fn residual_ss(x: &MultiwayArray, u: &Matrix, loadings: &[Matrix]) -> f64 {
    let refs: Vec<&Matrix> = loadings.iter().collect();
    let vm = crate::tensor::khatri_rao(&refs);
    let mut resid = x.sample_matrix();
    resid.gemm(-1.0, u, &vm.transpose(), 1.0);
    resid.norm_squared()
}

pub fn cp_fit_als(x: &MultiwayArray, config: &CpConfig) -> Result<CpFit> {
    let order = x.order();
    let rank = config.rank;
    if order < 2 {
        return invalid("CP fit needs an array of order at least 2");
    }
    if rank == 0 {
        return invalid("rank must be at least 1");
    }
    let dims = x.dims();
    let limit = (0..order)
        .map(|m| dims.iter().enumerate().filter(|(j, _)| *j != m).map(|(_, d)| d).product::<usize>())
        .min()
        .unwrap_or(1);
    if rank > limit {
        return invalid(format!(
            "rank {rank} exceeds {limit}, the smallest product of all but one dimension"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut factors: Vec<Matrix> = dims
        .iter()
        .map(|&d| standard_normal_matrix(d, rank, &mut rng))
        .collect();
    let mut diagnostics = Vec::new();

    if x.values().iter().all(|v| *v == 0.0) {
        let mut loadings = factors.split_off(1);
        for f in &mut loadings {
            normalize_columns(f);
            sign_fix(f, None);
        }
        return Ok(CpFit {
            u: Matrix::zeros(dims[0], rank),
            loadings: LoadingSet::new(loadings)?,
            rss: 0.0,
            rss_trace: vec![],
            n_iters: 0,
            converged: true,
            diagnostics,
        });
    }

    for f in factors.iter_mut().skip(1) {
        normalize_columns(f);
    }
    let mut rss_prev = residual_ss(x, &factors[0], &factors[1..]);
    let mut rss_trace = Vec::new();
    let mut converged = false;
    let mut n_iters = 0;
    let mut warned = false;

    for iter in 1..=config.max_iters {
        n_iters = iter;
        for m in 0..order {
            let others: Vec<&Matrix> = factors
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != m)
                .map(|(_, f)| f)
                .collect();
            let rhs = mttkrp(x, m, &others)?;
            let gram = hadamard_grams(others.into_iter());
            let (update, jittered) = right_solve_spd(&rhs, &gram)?;
            if jittered && !warned {
                diagnostics.push(format!(
                    "iteration {iter}: singular normal equations in mode {m}, ridge-stabilized"
                ));
                warned = true;
            }
            factors[m] = update;
            if m > 0 {
                let norms = normalize_columns(&mut factors[m]);
                for (r, s) in norms.into_iter().enumerate() {
                    factors[0].column_mut(r).scale_mut(s);
                }
            }
        }
        let rss = residual_ss(x, &factors[0], &factors[1..]);
        rss_trace.push(rss);
        let decrease = if rss_prev > 0.0 {
            (rss_prev - rss) / rss_prev
        } else {
            0.0
        };
        rss_prev = rss;
        if decrease < config.tol {
            converged = true;
            break;
        }
    }

    let mut u = factors.remove(0);
    let mut loadings = factors;
    for f in &mut loadings {
        let norms = normalize_columns(f);
        for (r, s) in norms.into_iter().enumerate() {
            u.column_mut(r).scale_mut(s);
        }
        sign_fix(f, Some(&mut u));
    }
    let order_idx = {
        let norms: Vec<f64> = u.column_iter().map(|c| c.norm()).collect();
        let mut idx: Vec<usize> = (0..rank).collect();
        idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
        idx
    };
    let u = u.select_columns(order_idx.iter());
    let loadings: Vec<Matrix> = loadings
        .iter()
        .map(|f| f.select_columns(order_idx.iter()))
        .collect();
    let rss = residual_ss(x, &u, &loadings);
    Ok(CpFit {
        u,
        loadings: LoadingSet::new(loadings)?,
        rss,
        rss_trace,
        n_iters,
        converged,
        diagnostics,
    })
}

/// Flips columns so their first nonzero entry is positive, moving the sign into `u`.
fn sign_fix(f: &mut Matrix, mut u: Option<&mut Matrix>) {
    for r in 0..f.ncols() {
        if leading_sign(f.column(r).iter()) < 0.0 {
            f.column_mut(r).neg_mut();
            if let Some(u) = u.as_deref_mut() {
                u.column_mut(r).neg_mut();
            }
        }
    }
}
