//! Monte Carlo experiment runner: simulate, estimate corrected and naive,
//! one warp-speed bootstrap draw per replication, and aggregate bias, RMSE,
//! MAE, and bootstrap coverage into a report.
//!
//! Replication `s` derives all of its randomness from the master seed and
//! `s` alone, and aggregation runs in replication order after the parallel
//! section, so a report is a pure function of its configuration.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::ValidatedData;
use crate::dgp::{simulate, DgpSpec};
use crate::error::Error;
use crate::estimator::{
    estimate_corrected, estimate_naive, mean_marginal, product_moment_marginal,
    twoway_fe_estimand, twoway_fe_marginal, EstimateOptions, EstimateResult, MomentModel,
    SolveOptions, TwowayFeSpec,
};
use crate::inference::{resample, warp_speed_coverage_from};
use crate::link::LinkFunction;
use crate::measure::{jump_masses, GridStrategy, JumpGrid, SignedMeasure};
use crate::seed::{derived_seed, substream, tags};
use crate::stats::{compensated_sum, mean};
use crate::transform::CorrectedCdf;

/// Serializable moment-model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `theta = E[Z]`, dimension `2d`.
    Mean,
    /// `theta = E[Z11 * Z21]`, scalar.
    ProductMoment,
    /// `theta = P(Z2 = a | Z1 = b)` for scalar waves.
    CondProb { a: f64, b: f64 },
    /// Two-period within-transformation slope vector.
    TwowayFe { x_indices: Vec<usize>, y_index: usize },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Mean => "mean",
            ModelSpec::ProductMoment => "product-moment",
            ModelSpec::CondProb { .. } => "cond-prob",
            ModelSpec::TwowayFe { .. } => "twoway-fe",
        }
    }

    pub fn dim_theta(&self, d: usize) -> usize {
        match self {
            ModelSpec::Mean => 2 * d,
            ModelSpec::ProductMoment | ModelSpec::CondProb { .. } => 1,
            ModelSpec::TwowayFe { x_indices, .. } => x_indices.len(),
        }
    }

    /// GMM moment model; `None` for the within estimator, which has its own
    /// solution path.
    pub fn moment_model(&self, d: usize) -> Option<MomentModel> {
        match self {
            ModelSpec::Mean => Some(MomentModel::mean(2 * d)),
            ModelSpec::ProductMoment => Some(MomentModel::product_moment(0, d)),
            ModelSpec::CondProb { a, b } => Some(MomentModel::cond_prob(*a, *b)),
            ModelSpec::TwowayFe { .. } => None,
        }
    }

    fn fe_spec(&self) -> Option<TwowayFeSpec> {
        match self {
            ModelSpec::TwowayFe { x_indices, y_index } => Some(TwowayFeSpec {
                x_indices: x_indices.clone(),
                y_index: *y_index,
            }),
            _ => None,
        }
    }
}

/// Corrected estimate for any model spec.
///
/// With the full-product strategy on multivariate waves, the built-in
/// models route through the pair-marginalized integrator, which computes
/// the full-product estimate without materializing the product grid.
pub fn corrected_fit(
    data: &ValidatedData,
    link: &LinkFunction,
    model: &ModelSpec,
    opts: &EstimateOptions,
) -> Result<EstimateResult, Error> {
    let d = data.d();
    if opts.grid == GridStrategy::FullProduct && d > 1 {
        let f = CorrectedCdf::build(data, link.clone())?;
        return match model {
            ModelSpec::Mean => mean_marginal(&f),
            ModelSpec::ProductMoment => product_moment_marginal(&f, 0, d),
            ModelSpec::TwowayFe { .. } => {
                let fe = model.fe_spec().expect("twoway-fe");
                twoway_fe_marginal(&f, &fe)
            }
            ModelSpec::CondProb { .. } => Err(Error::InvalidArgument(
                "cond-prob is defined for scalar waves".into(),
            )),
        };
    }
    match model.moment_model(d) {
        Some(m) => estimate_corrected(data, link, &m, opts),
        None => {
            let fe = model.fe_spec().expect("non-GMM model is twoway-fe");
            let f = CorrectedCdf::build(data, link.clone())?;
            let mut grid = JumpGrid::build(data, opts.grid);
            if let Some(scale) = opts.h_scale {
                grid = grid.with_h_scaled(scale);
            }
            let mu = jump_masses(&f, &grid)?;
            let theta = twoway_fe_estimand(&mu, &fe)?;
            Ok(EstimateResult {
                theta_hat: theta,
                residual_norm: 0.0,
                solver_iterations: 1,
                converged: true,
                method: "within".into(),
                total_mass: mu.total_mass(),
                negative_mass: mu.negative_mass(),
                clamp_events: f.clamp_events(),
                grid_atoms: mu.len(),
                dropped_atoms: mu.dropped_atoms(),
                dropped_mass: mu.dropped_mass(),
            })
        }
    }
}

/// Naive estimate (stayers only) for any model spec.
pub fn naive_fit(
    data: &ValidatedData,
    model: &ModelSpec,
    opts: &EstimateOptions,
) -> Result<EstimateResult, Error> {
    match model.moment_model(data.d()) {
        Some(m) => estimate_naive(data, &m, opts),
        None => {
            let fe = model.fe_spec().expect("non-GMM model is twoway-fe");
            let mu = SignedMeasure::uniform(&data.stayer_joint_rows())?;
            let theta = twoway_fe_estimand(&mu, &fe)?;
            Ok(EstimateResult {
                theta_hat: theta,
                residual_norm: 0.0,
                solver_iterations: 1,
                converged: true,
                method: "naive-within".into(),
                total_mass: mu.total_mass(),
                negative_mass: mu.negative_mass(),
                clamp_events: 0,
                grid_atoms: mu.len(),
                dropped_atoms: 0,
                dropped_mass: 0.0,
            })
        }
    }
}

fn default_levels() -> Vec<f64> {
    vec![0.90, 0.95, 0.99]
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct McConfig {
    #[serde(default)]
    pub label: String,
    pub dgp: DgpSpec,
    pub model: ModelSpec,
    pub n1: usize,
    pub nr: usize,
    pub replications: usize,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub grid: GridStrategy,
    #[serde(default)]
    pub solve: SolveOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub level: f64,
    pub rate: Vec<f64>,
}

/// Aggregated Monte Carlo results.
///
/// The wall time is informational only: it is skipped by serialization and
/// ignored by equality, so reports with the same configuration compare and
/// serialize identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub label: String,
    pub n1: usize,
    pub nr: usize,
    pub replications: usize,
    pub completed: usize,
    pub failed: usize,
    pub theta_true: Vec<f64>,
    /// Bias divided by the true value (discrete designs) or absolute.
    pub bias_is_relative: bool,
    pub corrected: MetricBlock,
    pub naive: MetricBlock,
    pub coverage: Vec<CoverageRow>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PartialEq for McReport {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.n1 == other.n1
            && self.nr == other.nr
            && self.replications == other.replications
            && self.completed == other.completed
            && self.failed == other.failed
            && self.theta_true == other.theta_true
            && self.bias_is_relative == other.bias_is_relative
            && self.corrected == other.corrected
            && self.naive == other.naive
            && self.coverage == other.coverage
    }
}

struct RepOutcome {
    corrected: Vec<f64>,
    naive: Vec<f64>,
    boot: Vec<f64>,
}

/// Run the Monte Carlo study.
///
/// With `progress` set, a machine-parsable `rep=<done>/<total>` line goes to
/// standard error as each replication completes.
pub fn run_mc(config: &McConfig, progress: bool) -> Result<McReport, Error> {
    config.dgp.validate()?;
    if config.replications == 0 {
        return Err(Error::InvalidArgument(
            "replications must be at least 1".into(),
        ));
    }
    let start = Instant::now();
    let link = config.dgp.link();
    let (theta_true, _) = config.dgp.true_theta();
    let opts = EstimateOptions {
        grid: config.grid,
        solve: config.solve.clone(),
        theta0: None,
        h_scale: None,
    };
    let s = config.replications;
    let done = AtomicUsize::new(0);

    let outcomes: Vec<Option<RepOutcome>> = (0..s)
        .into_par_iter()
        .map(|rep| {
            let out = (|| {
                let study_seed = derived_seed(config.seed, tags::MC_SIM, rep as u64);
                let study = simulate(&config.dgp, config.n1, config.nr, study_seed).ok()?;
                let data = ValidatedData::validate(study.panel, study.refreshment).ok()?;
                let corrected = corrected_fit(&data, &link, &config.model, &opts).ok()?;
                let naive = naive_fit(&data, &config.model, &opts).ok()?;
                let mut boot_rng = substream(config.seed, tags::MC_BOOT, rep as u64);
                let resampled = resample(&data, &mut boot_rng).ok()?;
                let boot = corrected_fit(&resampled, &link, &config.model, &opts).ok()?;
                Some(RepOutcome {
                    corrected: corrected.theta_hat,
                    naive: naive.theta_hat,
                    boot: boot.theta_hat,
                })
            })();
            if progress {
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!("rep={k}/{s}");
            }
            out
        })
        .collect();

    let successes: Vec<RepOutcome> = outcomes.into_iter().flatten().collect();
    let completed = successes.len();
    let failed = s - completed;
    if completed == 0 {
        return Err(Error::InvalidArgument(
            "every replication failed; check the design".into(),
        ));
    }

    let corrected: Vec<Vec<f64>> = successes.iter().map(|r| r.corrected.clone()).collect();
    let naive: Vec<Vec<f64>> = successes.iter().map(|r| r.naive.clone()).collect();
    let boots: Vec<Vec<f64>> = successes.iter().map(|r| r.boot.clone()).collect();

    let bias_is_relative = matches!(config.dgp, DgpSpec::Discrete(_));
    let metrics = |estimates: &[Vec<f64>]| -> MetricBlock {
        let dim = theta_true.len();
        let mut bias = Vec::with_capacity(dim);
        let mut rmse = Vec::with_capacity(dim);
        let mut mae = Vec::with_capacity(dim);
        for k in 0..dim {
            let errs: Vec<f64> = estimates.iter().map(|e| e[k] - theta_true[k]).collect();
            let mut b = mean(&errs);
            if bias_is_relative {
                b /= theta_true[k];
            }
            bias.push(b);
            rmse.push(
                (compensated_sum(errs.iter().map(|e| e * e)) / errs.len() as f64).sqrt(),
            );
            mae.push(mean(&errs.iter().map(|e| e.abs()).collect::<Vec<f64>>()));
        }
        MetricBlock { bias, rmse, mae }
    };

    let coverage_rates = warp_speed_coverage_from(&corrected, &boots, &theta_true, &config.levels);
    let coverage = config
        .levels
        .iter()
        .zip(coverage_rates)
        .map(|(&level, rate)| CoverageRow { level, rate })
        .collect();
    let corrected = metrics(&corrected);
    let naive = metrics(&naive);

    Ok(McReport {
        label: config.label.clone(),
        n1: config.n1,
        nr: config.nr,
        replications: s,
        completed,
        failed,
        theta_true,
        bias_is_relative,
        corrected,
        naive,
        coverage,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Output formats for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown-table" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!(
                "unknown report format '{other}' (expected json, csv, or markdown-table)"
            )),
        }
    }
}

fn join(values: &[f64], precision: usize) -> String {
    values
        .iter()
        .map(|v| format!("{v:.precision$}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Write the report in the requested format with stable field ordering.
pub fn emit_report<W: Write>(
    report: &McReport,
    format: ReportFormat,
    out: &mut W,
) -> std::io::Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, report)?;
            out.write_all(b"\n")
        }
        ReportFormat::Csv => {
            let mut header = vec![
                "label".to_string(),
                "n1".into(),
                "nr".into(),
                "replications".into(),
                "completed".into(),
                "failed".into(),
                "theta_true".into(),
                "bias_is_relative".into(),
                "corrected_bias".into(),
                "corrected_rmse".into(),
                "corrected_mae".into(),
                "naive_bias".into(),
                "naive_rmse".into(),
                "naive_mae".into(),
            ];
            for row in &report.coverage {
                header.push(format!("coverage_{:02.0}", row.level * 100.0));
            }
            let mut record = vec![
                report.label.clone(),
                report.n1.to_string(),
                report.nr.to_string(),
                report.replications.to_string(),
                report.completed.to_string(),
                report.failed.to_string(),
                join(&report.theta_true, 6),
                report.bias_is_relative.to_string(),
                join(&report.corrected.bias, 6),
                join(&report.corrected.rmse, 6),
                join(&report.corrected.mae, 6),
                join(&report.naive.bias, 6),
                join(&report.naive.rmse, 6),
                join(&report.naive.mae, 6),
            ];
            for row in &report.coverage {
                record.push(join(&row.rate, 4));
            }
            writeln!(out, "{}", header.join(","))?;
            writeln!(out, "{}", record.join(","))
        }
        ReportFormat::Markdown => {
            writeln!(
                out,
                "### {} (n1={}, nr={}, S={}, completed={})",
                if report.label.is_empty() {
                    "monte-carlo"
                } else {
                    &report.label
                },
                report.n1,
                report.nr,
                report.replications,
                report.completed
            )?;
            writeln!(out)?;
            writeln!(out, "| metric | corrected | naive |")?;
            writeln!(out, "|---|---|---|")?;
            let bias_label = if report.bias_is_relative {
                "bias (relative)"
            } else {
                "bias"
            };
            writeln!(
                out,
                "| {bias_label} | {} | {} |",
                join(&report.corrected.bias, 4),
                join(&report.naive.bias, 4)
            )?;
            writeln!(
                out,
                "| rmse | {} | {} |",
                join(&report.corrected.rmse, 4),
                join(&report.naive.rmse, 4)
            )?;
            writeln!(
                out,
                "| mae | {} | {} |",
                join(&report.corrected.mae, 4),
                join(&report.naive.mae, 4)
            )?;
            for row in &report.coverage {
                writeln!(
                    out,
                    "| coverage {:.0}% | {} |  |",
                    row.level * 100.0,
                    join(&row.rate, 3)
                )?;
            }
            Ok(())
        }
    }
}
