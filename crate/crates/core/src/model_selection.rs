//! Rank selection by held-out likelihood.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::supcp::{fit_multistart, marginal_loglik, Centering, FitConfig, FitResult, SupCpParams};
use crate::tensor::{Matrix, MultiwayArray};

/// One side of a train/test partition.
#[derive(Debug, Clone)]
pub struct DataSubset {
    pub x: MultiwayArray,
    pub y: Matrix,
    /// Sample indices into the original data, in the order they appear here.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainTestSplit {
    pub train: DataSubset,
    pub test: DataSubset,
    /// Means of the training samples, the centering used for both subsets.
    pub centering: Centering,
}

fn subset(x: &MultiwayArray, y: &Matrix, indices: Vec<usize>) -> Result<DataSubset> {
    let xm = x.sample_view();
    let sx = xm.select_rows(indices.iter());
    let sy = y.select_rows(indices.iter());
    Ok(DataSubset {
        x: MultiwayArray::from_sample_matrix(&sx, &x.dims()[1..])?,
        y: sy,
        indices,
    })
}

/// Uniformly random partition of the samples; `n_train = round(n · train_fraction)`.
/// Both subsets keep ascending sample order.
pub fn train_test_split(
    x: &MultiwayArray,
    y: &Matrix,
    train_fraction: f64,
    seed: u64,
) -> Result<TrainTestSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return invalid(format!("train fraction must lie in (0, 1), got {train_fraction}"));
    }
    if x.order() < 2 {
        return invalid("data must have a sample mode and at least one feature mode");
    }
    let n = x.dims()[0];
    if y.nrows() != n {
        return invalid(format!("covariates have {} rows, data has {n} samples", y.nrows()));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_test = n - n_train.min(n);
    if n_train < 2 || n_test < 2 {
        return invalid(format!(
            "split of {n} samples at fraction {train_fraction} gives {n_train} train / {n_test} test; both need at least 2"
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = perm[..n_train].to_vec();
    let mut test_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train = subset(x, y, train_idx)?;
    let test = subset(x, y, test_idx)?;
    let centering = Centering::from_data(&train.x, &train.y);
    Ok(TrainTestSplit { train, test, centering })
}

/// Marginal log-likelihood of held-out data under a fit, after removing the
/// fit's (training) means.
pub fn test_loglik(x: &MultiwayArray, y: &Matrix, fit: &FitResult) -> Result<f64> {
    heldout_loglik(x, y, &fit.params, &fit.centering)
}

/// [`test_loglik`] for stored parameters and centering.
pub fn heldout_loglik(
    x: &MultiwayArray,
    y: &Matrix,
    params: &SupCpParams,
    centering: &Centering,
) -> Result<f64> {
    let (xc, yc) = centering.apply(x, y)?;
    marginal_loglik(&xc, &yc, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelectionReport {
    pub candidate_ranks: Vec<usize>,
    /// Held-out log-likelihood per candidate; `None` where the fit failed.
    pub test_logliks: Vec<Option<f64>>,
    pub train_logliks: Vec<Option<f64>>,
    /// Error messages of failed candidates.
    pub failures: Vec<Option<String>>,
    pub chosen_rank: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Starting seeds shared by every candidate rank.
    pub fit_seeds: Vec<u64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            split_seed: 0,
            fit_seeds: vec![0],
        }
    }
}

/// Fits every candidate rank on the training part of one split and picks the
/// rank with the highest held-out log-likelihood (the smallest rank on ties).
/// Candidate fits run concurrently; failed candidates are skipped.
pub fn select_rank(
    x: &MultiwayArray,
    y: &Matrix,
    candidate_ranks: &[usize],
    fit_config: &FitConfig,
    selection: &SelectionConfig,
) -> Result<RankSelectionReport> {
    if candidate_ranks.is_empty() {
        return invalid("at least one candidate rank is required");
    }
    if candidate_ranks.contains(&0) {
        return invalid("candidate ranks must be at least 1");
    }
    let split = train_test_split(x, y, selection.train_fraction, selection.split_seed)?;
    let outcomes: Vec<Result<(f64, f64)>> = candidate_ranks
        .par_iter()
        .map(|&rank| {
            let config = FitConfig {
                rank,
                ..fit_config.clone()
            };
            let fit = fit_multistart(&split.train.x, &split.train.y, &config, &selection.fit_seeds)?;
            let test = test_loglik(&split.test.x, &split.test.y, &fit)?;
            Ok((fit.final_loglik(), test))
        })
        .collect();

    let mut train_logliks = Vec::with_capacity(outcomes.len());
    let mut test_logliks = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, f64)> = None;
    let mut first_err: Option<Error> = None;
    for (&rank, outcome) in candidate_ranks.iter().zip(outcomes) {
        match outcome {
            Ok((train, test)) => {
                train_logliks.push(Some(train));
                test_logliks.push(Some(test));
                failures.push(None);
                let better = match best {
                    None => true,
                    Some((r, b)) => test > b || (test == b && rank < r),
                };
                if better {
                    best = Some((rank, test));
                }
            }
            Err(e) => {
                train_logliks.push(None);
                test_logliks.push(None);
                failures.push(Some(e.to_string()));
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((chosen_rank, _)) = best else {
        return Err(first_err.expect("nonempty candidates"));
    };
    Ok(RankSelectionReport {
        candidate_ranks: candidate_ranks.to_vec(),
        test_logliks,
        train_logliks,
        failures,
        chosen_rank,
        split_seed: selection.split_seed,
        train_fraction: selection.train_fraction,
    })
}
