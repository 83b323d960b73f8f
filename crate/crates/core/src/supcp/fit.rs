use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cp_als::{cp_fit_als, residual_ss, CpConfig};
use crate::error::{invalid, Error, Result};
use crate::linalg::{derive_seed, normalize_columns, ols, standard_normal_matrix};
use crate::tensor::{vmat, LoadingSet, Matrix, MultiwayArray};

use super::em::{normalize_mapped, posterior, regression_update, update_loadings};
use super::likelihood::{loglik_from_parts, Projections};
use super::{Centering, EStepResult, FitConfig, FitResult, InitMethod, SupCpParams};

/// Lower bound on the initial noise variance; only reached on noiseless data.
const INIT_SIGMA_E2_FLOOR: f64 = 1.5e-154;

/// Starting values together with the initial score matrix they were derived from.
#[derive(Debug, Clone)]
pub struct InitState {
    pub params: SupCpParams,
    pub u: Matrix,
}

/// Initial parameters for centered data `x`, `y`.
///
/// Loadings and scores come from random unit-norm loadings with
/// `U = X⁽¹⁾ Vmat`, or from a least-squares CP fit. `B` is the OLS fit of `U`
/// on `Y`, `σ²_e` the sample variance of the CP residual entries and
/// `Σ_f = diag(FᵀF / n)` for `F = U − Y B`.
pub fn initialize(x: &MultiwayArray, y: &Matrix, config: &FitConfig) -> Result<InitState> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    initialize_with_rng(x, y, config, &mut rng)
}

fn initialize_with_rng(
    x: &MultiwayArray,
    y: &Matrix,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<InitState> {
    let rank = config.rank;
    let data_dims = &x.dims()[1..];
    let (u, loadings) = match config.init_method {
        InitMethod::Random => {
            let factors: Vec<Matrix> = data_dims
                .iter()
                .map(|&d| {
                    let mut f = standard_normal_matrix(d, rank, rng);
                    normalize_columns(&mut f);
                    f
                })
                .collect();
            let loadings = LoadingSet::new(factors)?;
            (x.sample_view() * vmat(&loadings), loadings)
        }
        InitMethod::Cp => {
            let cp = cp_fit_als(
                x,
                &CpConfig {
                    seed: derive_seed(config.seed, 0),
                    ..CpConfig::new(rank)
                },
            )?;
            (cp.u, cp.loadings)
        }
    };

    let b = ols(y, &u)?;
    let n_entries = x.len() as f64;
    let rss = residual_ss(x, &u, loadings.factors());
    let vm_sums: Vec<f64> = vmat(&loadings).column_iter().map(|c| c.sum()).collect();
    let fitted_sum: f64 = u
        .column_iter()
        .zip(&vm_sums)
        .map(|(c, s)| c.sum() * s)
        .sum();
    let resid_mean = (x.values().iter().sum::<f64>() - fitted_sum) / n_entries;
    let var = (rss - n_entries * resid_mean * resid_mean) / (n_entries - 1.0).max(1.0);
    let sigma_e2 = var.max(INIT_SIGMA_E2_FLOOR);

    let f = &u - y * &b;
    let n = x.dims()[0] as f64;
    let sigma_f = match &config.fixed_sigma_f {
        Some(s) => s.clone(),
        None => Matrix::from_diagonal(&(f.transpose() * &f / n).diagonal()),
    };
    let (mut params, _) = normalize_mapped(SupCpParams {
        loadings,
        b,
        sigma_f,
        sigma_e2,
        diag_constraint: config.diag_sigma_f,
    })?;
    if let Some(s) = &config.fixed_sigma_f {
        params.sigma_f = s.clone();
    }
    Ok(InitState { params, u })
}

fn check_inputs(x: &MultiwayArray, y: &Matrix, config: &FitConfig) -> Result<()> {
    config.validate()?;
    if x.order() < 2 {
        return invalid("data must have a sample mode and at least one feature mode");
    }
    let n = x.dims()[0];
    if n < 2 {
        return invalid("at least two samples are required");
    }
    if y.nrows() != n {
        return invalid(format!("covariates have {} rows, data has {n} samples", y.nrows()));
    }
    Ok(())
}

/// Maximum-likelihood fit by EM with optional annealing.
///
/// `x` and `y` are centered internally (means are kept in the result). Each
/// iteration runs the E-step, perturbs the posterior scores during the first
/// `anneal_iters` iterations with `N(0, (σ̂_e / l)²)` noise, updates the
/// loadings, then `B`, `Σ_f`, `σ²_e`, normalizes, and records the marginal
/// log-likelihood. After annealing the fit stops once the relative change of
/// the log-likelihood drops below `tol`.
pub fn fit(x: &MultiwayArray, y: &Matrix, config: &FitConfig) -> Result<FitResult> {
    check_inputs(x, y, config)?;
    let centering = Centering::from_data(x, y);
    let (xc, yc) = centering.apply(x, y)?;
    let n = xc.dims()[0];
    let d = xc.sample_size();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initialize_with_rng(&xc, &yc, config, &mut rng)?.params;
    let x_norm2 = xc.values().iter().map(|v| v * v).sum::<f64>();
    let mut proj = Projections::compute(&xc, &params);

    let mut trace = Vec::new();
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut n_iters = 0;
    let (mut warned_sigma_f, mut warned_jitter, mut warned_floor) = (false, false, false);

    for iter in 1..=config.max_iters {
        n_iters = iter;
        let yb = &yc * &params.b;
        let (mut e, degenerate) = posterior(&proj, &yb, &params)?;
        if degenerate && !warned_sigma_f && config.fixed_sigma_f.is_none() {
            diagnostics.push(format!("iteration {iter}: Σ_f is numerically singular"));
            warned_sigma_f = true;
        }
        if iter <= config.anneal_iters {
            let sd = params.sigma_e2.sqrt() / iter as f64;
            for v in e.u_hat.iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }

        let (loadings, jittered) = update_loadings(&xc, &e, &params.loadings)?;
        if jittered && !warned_jitter {
            diagnostics.push(format!("iteration {iter}: loading system ridge-stabilized"));
            warned_jitter = true;
        }
        let new_proj = Projections {
            xv: xc.sample_view() * vmat(&loadings),
            gram: loadings.vmat_gram(),
        };
        let update = regression_update(d, x_norm2, &new_proj, &yc, &e, config.diag_sigma_f)?;
        if update.floored && !warned_floor {
            diagnostics.push(format!("iteration {iter}: σ²_e floored"));
            warned_floor = true;
        }
        let (mut next, map) = normalize_mapped(SupCpParams {
            loadings,
            b: update.b,
            sigma_f: update.sigma_f,
            sigma_e2: update.sigma_e2,
            diag_constraint: config.diag_sigma_f,
        })?;
        if let Some(s) = &config.fixed_sigma_f {
            next.sigma_f = s.clone();
        }
        params = next;
        proj = Projections {
            xv: map.apply_cols(&new_proj.xv),
            gram: map.apply_gram(&new_proj.gram),
        };

        let ll = loglik_from_parts(n, d, x_norm2, &proj, &(&yc * &params.b), &params)?;
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!(
                "log-likelihood became {ll} at iteration {iter} (previous {:?}, σ²_e = {})",
                trace.last(),
                params.sigma_e2
            )));
        }
        let prev = trace.last().copied();
        trace.push(ll);
        if iter > config.anneal_iters {
            if let Some(prev) = prev {
                if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.tol {
                    converged = true;
                    break;
                }
            }
        }
    }

    let yb = &yc * &params.b;
    let e_step: EStepResult = posterior(&proj, &yb, &params)?.0;
    Ok(FitResult {
        params,
        e_step,
        loglik_trace: trace,
        converged,
        n_iters,
        centering,
        seed: config.seed,
        diagnostics,
    })
}

/// Runs [`fit`] once per seed (concurrently) and keeps the highest final
/// log-likelihood; ties go to the earliest seed. Fails only if every start fails.
pub fn fit_multistart(
    x: &MultiwayArray,
    y: &Matrix,
    config: &FitConfig,
    seeds: &[u64],
) -> Result<FitResult> {
    if seeds.is_empty() {
        return invalid("at least one seed is required");
    }
    let results: Vec<Result<FitResult>> = seeds
        .par_iter()
        .map(|&seed| {
            fit(
                x,
                y,
                &FitConfig {
                    seed,
                    ..config.clone()
                },
            )
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.final_loglik() > b.final_loglik()) {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("nonempty seeds"))
}
