use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp_als::{cp_fit_als, CpConfig};
use crate::error::{invalid, Error, Result};
use crate::linalg::{derive_seed, median};
use crate::supcp::{fit, fit_multistart, FitConfig, InitMethod};

use super::metrics::{mad, principal_angle, relative_errors, signal_error};
use super::{generate_init_sim, generate_setting, SimData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SupCp,
    Cp,
    SupSvd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SupCp, Method::Cp, Method::SupSvd];
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supcp" => Ok(Self::SupCp),
            "cp" => Ok(Self::Cp),
            "supsvd" => Ok(Self::SupSvd),
            other => invalid(format!("unknown method {other:?} (expected supcp, cp or supsvd)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SupCp => "supcp",
            Self::Cp => "cp",
            Self::SupSvd => "supsvd",
        })
    }
}

/// Median and MAD of one metric for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub metric: String,
    pub median: f64,
    pub mad: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTiming {
    pub run: usize,
    pub method: Method,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFailures {
    pub method: Method,
    pub count: usize,
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub setting: u8,
    pub n_runs: usize,
    pub seed: u64,
    pub rows: Vec<BenchmarkRow>,
    /// Wall-clock seconds per successful fit.
    pub timings: Vec<FitTiming>,
    pub failures: Vec<MethodFailures>,
}

impl BenchmarkReport {
    pub fn row(&self, method: Method, metric: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn median(&self, method: Method, metric: &str) -> Option<f64> {
        self.row(method, metric).map(|r| r.median)
    }
}

/// Fit settings shared by every replicate; the rank is always the true rank.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub fit: FitConfig,
    pub cp: CpConfig,
    /// Starts per SupCP and SupSVD fit; the highest log-likelihood is kept.
    pub n_starts: usize,
    /// Starts per CP fit; the lowest residual sum of squares is kept.
    pub cp_starts: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::new(1),
            cp: CpConfig::new(1),
            n_starts: 1,
            cp_starts: 1,
        }
    }
}

fn best_cp(x: &crate::tensor::MultiwayArray, config: &CpConfig, seeds: &[u64]) -> Result<crate::cp_als::CpFit> {
    let mut best: Option<crate::cp_als::CpFit> = None;
    for &seed in seeds {
        let fit = cp_fit_als(x, &CpConfig { seed, ..config.clone() })?;
        if best.as_ref().is_none_or(|b| fit.rss < b.rss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

type Metrics = Vec<(&'static str, f64)>;

const ANGLE_NAMES: [&str; 4] = ["angle_v1", "angle_v2", "angle_v3", "angle_v4"];

fn evaluate_method(
    method: Method,
    data: &SimData,
    config: &BenchmarkConfig,
    fit_seed: u64,
) -> Result<(Metrics, f64)> {
    let truth = &data.truth;
    let rank = truth.loadings.rank();
    let mut metrics = Metrics::new();
    let starts = if method == Method::Cp { config.cp_starts } else { config.n_starts };
    let seeds: Vec<u64> = if starts <= 1 {
        vec![fit_seed]
    } else {
        (0..starts as u64).map(|s| derive_seed(fit_seed, s)).collect()
    };
    let start = Instant::now();
    match method {
        Method::SupCp => {
            let res = fit_multistart(&data.x, &data.y, &FitConfig { rank, ..config.fit.clone() }, &seeds)?;
            let seconds = start.elapsed().as_secs_f64();
            metrics.push(("se", signal_error(&res.fitted_signal()?, &truth.signal)?));
            for (k, name) in ANGLE_NAMES.iter().enumerate().take(truth.loadings.n_modes()) {
                metrics.push((name, principal_angle(truth.loadings.factor(k), res.params.loadings.factor(k))?));
            }
            push_param_errors(&mut metrics, &res.params, data)?;
            metrics.push(("time_s", seconds));
            Ok((metrics, seconds))
        }
        Method::Cp => {
            let cp = best_cp(&data.x, &CpConfig { rank, ..config.cp.clone() }, &seeds)?;
            let seconds = start.elapsed().as_secs_f64();
            metrics.push(("se", signal_error(&cp.signal()?, &truth.signal)?));
            for (k, name) in ANGLE_NAMES.iter().enumerate().take(truth.loadings.n_modes()) {
                metrics.push((name, principal_angle(truth.loadings.factor(k), cp.loadings.factor(k))?));
            }
            metrics.push(("time_s", seconds));
            Ok((metrics, seconds))
        }
        Method::SupSvd => {
            let dims = data.x.dims().to_vec();
            let flat = data.x.reshaped(vec![dims[0], data.x.sample_size()])?;
            let res = fit_multistart(&flat, &data.y, &FitConfig { rank, ..config.fit.clone() }, &seeds)?;
            let seconds = start.elapsed().as_secs_f64();
            let signal = res.fitted_signal()?.reshaped(dims)?;
            metrics.push(("se", signal_error(&signal, &truth.signal)?));
            push_param_errors(&mut metrics, &res.params, data)?;
            metrics.push(("time_s", seconds));
            Ok((metrics, seconds))
        }
    }
}

fn push_param_errors(metrics: &mut Metrics, params: &crate::supcp::SupCpParams, data: &SimData) -> Result<()> {
    let re = relative_errors(params, &data.truth)?;
    metrics.push(("b_error", re.b_error));
    metrics.push(("re_e_x100", 100.0 * re.re_e));
    if let Some(f) = re.re_f {
        metrics.push(("re_f_x100", 100.0 * f));
    }
    Ok(())
}

/// Runs `n_runs` replicates of a setting. Replicate `i` draws its data with
/// seed `derive_seed(seed, i)` and fits with `f = derive_seed(that, 1)` (or,
/// with several starts, `derive_seed(f, s)` for start `s`); replicates run
/// concurrently. Failed fits are excluded and counted per method.
pub fn run_benchmark(
    setting: u8,
    n_runs: usize,
    methods: &[Method],
    seed: u64,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    if n_runs == 0 {
        return invalid("at least one run is required");
    }
    if methods.is_empty() {
        return invalid("at least one method is required");
    }
    if !(1..=4).contains(&setting) {
        return invalid(format!("setting must be 1..4, got {setting}"));
    }
    let outcomes: Vec<Vec<Result<(Metrics, f64)>>> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let data_seed = derive_seed(seed, run as u64);
            let fit_seed = derive_seed(data_seed, 1);
            match generate_setting(setting, data_seed) {
                Ok(data) => methods
                    .iter()
                    .map(|&m| evaluate_method(m, &data, config, fit_seed))
                    .collect(),
                Err(e) => methods.iter().map(|_| Err(Error::InvalidArgument(e.to_string()))).collect(),
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut failures = Vec::new();
    for (mi, &method) in methods.iter().enumerate() {
        let mut names: Vec<&'static str> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut count = 0;
        let mut first_error = None;
        for (run, outcome) in outcomes.iter().enumerate() {
            match &outcome[mi] {
                Ok((metrics, seconds)) => {
                    timings.push(FitTiming { run, method, seconds: *seconds });
                    for (name, v) in metrics {
                        match names.iter().position(|n| n == name) {
                            Some(p) => values[p].push(*v),
                            None => {
                                names.push(name);
                                values.push(vec![*v]);
                            }
                        }
                    }
                }
                Err(e) => {
                    count += 1;
                    first_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        for (name, mut vals) in names.into_iter().zip(values) {
            let m = mad(&vals);
            rows.push(BenchmarkRow {
                method,
                metric: name.to_string(),
                median: median(&mut vals),
                mad: m,
                n_runs: vals.len(),
            });
        }
        failures.push(MethodFailures { method, count, first_error });
    }
    Ok(BenchmarkReport { setting, n_runs, seed, rows, timings, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitVariant {
    pub init: InitMethod,
    pub anneal_iters: usize,
}

impl InitVariant {
    /// `{random, cp} × {0, 100, 500}` annealing iterations.
    pub fn standard() -> Vec<InitVariant> {
        [InitMethod::Random, InitMethod::Cp]
            .into_iter()
            .flat_map(|init| [0, 100, 500].map(|anneal_iters| InitVariant { init, anneal_iters }))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct InitStudyConfig {
    /// Iteration budget after the annealing phase.
    pub iters_after_anneal: usize,
    pub tol: f64,
}

impl Default for InitStudyConfig {
    fn default() -> Self {
        Self {
            iters_after_anneal: 2000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitStudyRow {
    pub init: InitMethod,
    pub anneal_iters: usize,
    pub n_datasets: usize,
    pub mean_loglik: f64,
    pub sd_loglik: f64,
    pub mean_abs_diff: f64,
    pub sd_abs_diff: f64,
    pub mean_time_s: f64,
    pub sd_time_s: f64,
    /// Between-run absolute log-likelihood difference per dataset.
    pub abs_diffs: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Sensitivity to initialization: every variant is fitted twice per dataset
/// with different seeds. Dataset `i` uses seed `derive_seed(seed, i)`; run `j`
/// of variant `v` uses `derive_seed(dataset_seed, 1 + 2v + j)`.
pub fn run_init_study(
    n_datasets: usize,
    variants: &[InitVariant],
    seed: u64,
    config: &InitStudyConfig,
) -> Result<Vec<InitStudyRow>> {
    if n_datasets == 0 || variants.is_empty() {
        return invalid("at least one dataset and one variant are required");
    }
    type Run = (f64, f64);
    let per_dataset: Vec<Result<Vec<[Run; 2]>>> = (0..n_datasets)
        .into_par_iter()
        .map(|i| {
            let data_seed = derive_seed(seed, i as u64);
            let data = generate_init_sim(data_seed)?;
            variants
                .iter()
                .enumerate()
                .map(|(v, variant)| {
                    let run = |j: u64| -> Result<Run> {
                        let cfg = FitConfig {
                            init_method: variant.init,
                            anneal_iters: variant.anneal_iters,
                            max_iters: variant.anneal_iters + config.iters_after_anneal,
                            tol: config.tol,
                            seed: derive_seed(data_seed, 1 + 2 * v as u64 + j),
                            ..FitConfig::new(2)
                        };
                        let start = Instant::now();
                        let res = fit(&data.x, &data.y, &cfg)?;
                        Ok((res.final_loglik(), start.elapsed().as_secs_f64()))
                    };
                    Ok([run(0)?, run(1)?])
                })
                .collect()
        })
        .collect();
    let per_dataset: Vec<Vec<[Run; 2]>> = per_dataset.into_iter().collect::<Result<_>>()?;

    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let runs: Vec<[Run; 2]> = per_dataset.iter().map(|d| d[v]).collect();
            let logliks: Vec<f64> = runs.iter().flat_map(|r| [r[0].0, r[1].0]).collect();
            let times: Vec<f64> = runs.iter().flat_map(|r| [r[0].1, r[1].1]).collect();
            let abs_diffs: Vec<f64> = runs.iter().map(|r| (r[0].0 - r[1].0).abs()).collect();
            let (mean_loglik, sd_loglik) = mean_sd(&logliks);
            let (mean_abs_diff, sd_abs_diff) = mean_sd(&abs_diffs);
            let (mean_time_s, sd_time_s) = mean_sd(&times);
            InitStudyRow {
                init: variant.init,
                anneal_iters: variant.anneal_iters,
                n_datasets,
                mean_loglik,
                sd_loglik,
                mean_abs_diff,
                sd_abs_diff,
                mean_time_s,
                sd_time_s,
                abs_diffs,
            }
        })
        .collect())
}

