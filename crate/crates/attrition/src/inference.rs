//! Nonparametric bootstrap confidence intervals.
//!
//! A replicate resamples the panel rows and the refreshment rows
//! independently, each with replacement, and reruns the corrected estimator.
//! Intervals are percentile intervals with linear interpolation between
//! order statistics. Replicates that fail (a resample with no stayers, a
//! solver breakdown) are dropped and counted rather than retried, which
//! keeps the whole construction a pure function of the seed.
//!
//! The warp-speed variant for Monte Carlo studies draws one bootstrap
//! replicate per simulation replication and pools the centered deviations
//! across replications to build every replication's interval.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{PanelDataset, RefreshmentDataset, ValidatedData};
use crate::dgp::{simulate, DgpSpec};
use crate::error::Error;
use crate::estimator::{estimate_corrected, EstimateOptions, MomentModel};
use crate::link::LinkFunction;
use crate::seed::{substream, tags};
use crate::stats::quantile_sorted;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("bootstrap needs at least 100 replicates, got {b}")]
    TooFewReplicates { b: usize },
    #[error("confidence level {level} must be inside (0,1)")]
    BadLevel { level: f64 },
    #[error("{failed} of {b} bootstrap replicates failed")]
    TooManyFailures { failed: usize, b: usize },
}

/// Per-level lower and upper interval endpoints, componentwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInterval {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Successful replicates in replicate-index order.
    pub replicates: Vec<Vec<f64>>,
    pub intervals: Vec<LevelInterval>,
    pub levels: Vec<f64>,
    pub b: usize,
    pub failed_replicates: usize,
    /// More than 10 percent of replicates failed.
    pub high_failure_warning: bool,
}

/// Resample `n1` panel rows and `nr` refreshment rows independently, with
/// replacement.
pub fn resample<R: Rng>(data: &ValidatedData, rng: &mut R) -> Result<ValidatedData, Error> {
    let panel = data.panel();
    let n1 = panel.n1();
    let rows = (0..n1)
        .map(|_| panel.rows()[rng.random_range(0..n1)].clone())
        .collect();
    let nr = data.n_r();
    let refreshment = (0..nr)
        .map(|_| data.refreshment().rows()[rng.random_range(0..nr)].clone())
        .collect();
    let panel = PanelDataset::new(rows)?;
    let refreshment = RefreshmentDataset::new(refreshment)?;
    Ok(ValidatedData::validate(panel, refreshment)?)
}

/// One bootstrap replicate of the corrected estimator.
pub fn bootstrap_once<R: Rng>(
    data: &ValidatedData,
    link: &LinkFunction,
    model: &MomentModel,
    opts: &EstimateOptions,
    rng: &mut R,
) -> Result<Vec<f64>, Error> {
    let resampled = resample(data, rng)?;
    Ok(estimate_corrected(&resampled, link, model, opts)?.theta_hat)
}

/// Percentile bootstrap intervals from `b` replicates.
///
/// Replicate `i` draws from `substream(seed, BOOTSTRAP, i)`, so the result
/// is a pure function of `(data, seed, b, opts)` and identical across thread
/// counts.
pub fn bootstrap_ci(
    data: &ValidatedData,
    link: &LinkFunction,
    model: &MomentModel,
    b: usize,
    levels: &[f64],
    opts: &EstimateOptions,
    seed: u64,
) -> Result<BootstrapResult, Error> {
    let link = link.clone();
    bootstrap_ci_with(data, b, levels, seed, move |resampled| {
        Ok(estimate_corrected(resampled, &link, model, opts)?.theta_hat)
    })
}

/// Percentile bootstrap around an arbitrary estimator of the resampled data.
pub fn bootstrap_ci_with<F>(
    data: &ValidatedData,
    b: usize,
    levels: &[f64],
    seed: u64,
    fit: F,
) -> Result<BootstrapResult, Error>
where
    F: Fn(&ValidatedData) -> Result<Vec<f64>, Error> + Sync,
{
    if b < 100 {
        return Err(BootstrapError::TooFewReplicates { b }.into());
    }
    for &level in levels {
        if !(0.0 < level && level < 1.0) {
            return Err(BootstrapError::BadLevel { level }.into());
        }
    }
    let outcomes: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, tags::BOOTSTRAP, i as u64);
            let resampled = resample(data, &mut rng).ok()?;
            fit(&resampled).ok()
        })
        .collect();
    let replicates: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let failed = b - replicates.len();
    if failed * 2 > b {
        return Err(BootstrapError::TooManyFailures { failed, b }.into());
    }
    let dim = replicates.first().map_or(0, |r| r.len());
    let intervals = percentile_intervals(&replicates, dim, levels);
    Ok(BootstrapResult {
        replicates,
        intervals,
        levels: levels.to_vec(),
        b,
        failed_replicates: failed,
        high_failure_warning: failed * 10 > b,
    })
}

fn percentile_intervals(replicates: &[Vec<f64>], dim: usize, levels: &[f64]) -> Vec<LevelInterval> {
    let mut sorted_components: Vec<Vec<f64>> = (0..dim)
        .map(|k| replicates.iter().map(|r| r[k]).collect())
        .collect();
    for comp in &mut sorted_components {
        comp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    levels
        .iter()
        .map(|&level| {
            let alpha = 1.0 - level;
            let lower = sorted_components
                .iter()
                .map(|c| quantile_sorted(c, alpha / 2.0))
                .collect();
            let upper = sorted_components
                .iter()
                .map(|c| quantile_sorted(c, 1.0 - alpha / 2.0))
                .collect();
            LevelInterval {
                level,
                lower,
                upper,
            }
        })
        .collect()
}

/// Coverage report from a warp-speed Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpeedReport {
    pub levels: Vec<f64>,
    /// Per level, per component coverage fractions.
    pub coverage: Vec<Vec<f64>>,
    pub replications: usize,
    pub failed: usize,
}

/// Per-replication coverage using one bootstrap draw per replication.
///
/// The interval for replication `s` at level `1 - alpha` is the estimate
/// plus the pooled `alpha/2` and `1 - alpha/2` quantiles of the centered
/// deviations `theta*_s - theta_s` across all replications.
///
/// `truth` is the model's population value under the design; `None` uses
/// the design's canonical target parameter.
#[allow(clippy::too_many_arguments)]
pub fn warp_speed_coverage(
    dgp: &DgpSpec,
    model: &MomentModel,
    n1: usize,
    nr: usize,
    s: usize,
    levels: &[f64],
    opts: &EstimateOptions,
    seed: u64,
    truth: Option<Vec<f64>>,
) -> Result<WarpSpeedReport, Error> {
    if s == 0 {
        return Err(Error::InvalidArgument(
            "warp-speed coverage needs at least one replication".into(),
        ));
    }
    let link = dgp.link();
    let theta0 = truth.unwrap_or_else(|| dgp.true_theta().0);
    let outcomes: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..s)
        .into_par_iter()
        .map(|rep| {
            let study_seed = crate::seed::derived_seed(seed, tags::MC_SIM, rep as u64);
            let study = simulate(dgp, n1, nr, study_seed).ok()?;
            let data = ValidatedData::validate(study.panel, study.refreshment).ok()?;
            let estimate = estimate_corrected(&data, &link, model, opts).ok()?;
            let mut boot_rng = substream(seed, tags::MC_BOOT, rep as u64);
            let boot = bootstrap_once(&data, &link, model, opts, &mut boot_rng).ok()?;
            Some((estimate.theta_hat, boot))
        })
        .collect();
    let successes: Vec<(Vec<f64>, Vec<f64>)> = outcomes.into_iter().flatten().collect();
    let failed = s - successes.len();
    let estimates: Vec<Vec<f64>> = successes.iter().map(|(e, _)| e.clone()).collect();
    let boots: Vec<Vec<f64>> = successes.iter().map(|(_, b)| b.clone()).collect();
    let coverage = warp_speed_coverage_from(&estimates, &boots, &theta0, levels);
    Ok(WarpSpeedReport {
        levels: levels.to_vec(),
        coverage,
        replications: s,
        failed,
    })
}

/// Coverage fractions from per-replication estimates and single bootstrap
/// draws; shared by the Monte Carlo harness.
pub(crate) fn warp_speed_coverage_from(
    estimates: &[Vec<f64>],
    boots: &[Vec<f64>],
    theta0: &[f64],
    levels: &[f64],
) -> Vec<Vec<f64>> {
    assert_eq!(estimates.len(), boots.len());
    let dim = theta0.len();
    let n = estimates.len();
    let mut deviations: Vec<Vec<f64>> = (0..dim)
        .map(|k| {
            let mut d: Vec<f64> = estimates
                .iter()
                .zip(boots)
                .map(|(e, b)| b[k] - e[k])
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d
        })
        .collect();
    if n == 0 {
        deviations = vec![vec![]; dim];
    }
    levels
        .iter()
        .map(|&level| {
            let alpha = 1.0 - level;
            (0..dim)
                .map(|k| {
                    if n == 0 {
                        return 0.0;
                    }
                    let lo = quantile_sorted(&deviations[k], alpha / 2.0);
                    let hi = quantile_sorted(&deviations[k], 1.0 - alpha / 2.0);
                    let covered = estimates
                        .iter()
                        .filter(|e| {
                            let l = e[k] + lo;
                            let u = e[k] + hi;
                            l <= theta0[k] && theta0[k] <= u
                        })
                        .count();
                    covered as f64 / n as f64
                })
                .collect()
        })
        .collect()
}
