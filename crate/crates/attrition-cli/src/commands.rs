//! Subcommand implementations and the exit-code policy.
//!
//! Exit codes: 0 on success, 1 for input and configuration problems, 2 for
//! numerical failures (non-convergence, unreachable calibration targets,
//! bootstrap failure bursts).

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use attrition::dataio::{
    load_panel_csv, load_refreshment_csv, write_panel_csv, write_refreshment_csv, PanelSchema,
    RefreshmentSchema, ValidatedData,
};
use attrition::dgp::{calibrate_attrition_with, simulate, DgpError, DgpSpec};
use attrition::error::Error;
use attrition::estimator::{EstimateOptions, EstimateResult, SolveOptions};
use attrition::harness::{corrected_fit, emit_report, naive_fit, run_mc, ReportFormat};
use attrition::inference::{bootstrap_ci_with, BootstrapError, LevelInterval};
use attrition::link::LinkFunction;
use attrition::measure::GridStrategy;
use attrition::stats::kendall_tau;
use attrition::{designs, McConfig};

use crate::config::{self, CalibrateConfig, EstimateConfig, SimulateConfig};

pub enum CliError {
    /// Bad inputs, files, or configuration: exit code 1.
    Input(String),
    /// The computation itself failed: exit code 2.
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => m,
        }
    }
}

fn classify(err: Error) -> CliError {
    match &err {
        Error::Solve(_) => CliError::Numerical(err.to_string()),
        Error::Bootstrap(BootstrapError::TooManyFailures { .. }) => {
            CliError::Numerical(err.to_string())
        }
        Error::Dgp(DgpError::CalibrationUnreachable { .. }) => {
            CliError::Numerical(err.to_string())
        }
        _ => CliError::Input(err.to_string()),
    }
}

pub fn parse_grid(s: &str) -> Result<GridStrategy, CliError> {
    match s {
        "paper-tuples" => Ok(GridStrategy::PaperTuples),
        "full-product" => Ok(GridStrategy::FullProduct),
        other => Err(CliError::Input(format!(
            "unknown grid strategy '{other}' (expected paper-tuples or full-product)"
        ))),
    }
}

fn link_by_name(name: &str) -> Result<LinkFunction, CliError> {
    LinkFunction::by_name(name)
        .ok_or_else(|| CliError::Input(format!("unknown link '{name}' (expected logit or exp)")))
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // ignore the error if a pool already exists (tests call this twice)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut file =
        File::create(path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| CliError::Input(format!("cannot serialize {}: {e}", path.display())))?;
    file.write_all(b"\n")
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub grid: Option<String>,
    pub link: Option<String>,
    pub bootstrap: Option<usize>,
}

#[derive(Serialize)]
struct BootstrapSummary {
    b: usize,
    failed_replicates: usize,
    high_failure_warning: bool,
    intervals: Vec<LevelInterval>,
}

#[derive(Serialize)]
struct EstimateOutput {
    model: String,
    link: String,
    grid: GridStrategy,
    seed: u64,
    n1: usize,
    n2: usize,
    n_r: usize,
    attrition_rate: f64,
    corrected: EstimateResult,
    naive: EstimateResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<BootstrapSummary>,
}

pub fn cmd_estimate(config_path: &Path, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg: EstimateConfig = config::load(config_path).map_err(CliError::Input)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = ov.threads {
        cfg.threads = threads;
    }
    if let Some(grid) = &ov.grid {
        cfg.grid = parse_grid(grid)?;
    }
    if let Some(link) = &ov.link {
        cfg.link = link.clone();
    }
    if let Some(b) = ov.bootstrap {
        cfg.bootstrap = b;
    }
    init_threads(cfg.threads);
    let link = link_by_name(&cfg.link)?;

    let panel_path = config::resolve(config_path, &cfg.panel);
    let refresh_path = config::resolve(config_path, &cfg.refreshment);
    let panel = load_panel_csv(&panel_path, &PanelSchema::default())
        .map_err(|e| classify(e.into()))?;
    let refreshment = load_refreshment_csv(&refresh_path, &RefreshmentSchema::default())
        .map_err(|e| classify(e.into()))?;
    let data = ValidatedData::validate(panel, refreshment).map_err(|e| classify(e.into()))?;

    let opts = EstimateOptions {
        grid: cfg.grid,
        solve: SolveOptions {
            tol: cfg.tol,
            max_iter: cfg.max_iter,
        },
        theta0: None,
        h_scale: None,
    };
    let corrected = corrected_fit(&data, &link, &cfg.model, &opts).map_err(classify)?;
    let naive = naive_fit(&data, &cfg.model, &opts).map_err(classify)?;

    let bootstrap = if cfg.bootstrap > 0 {
        let link_for_boot = link.clone();
        let model = cfg.model.clone();
        let opts_for_boot = opts.clone();
        let result = bootstrap_ci_with(&data, cfg.bootstrap, &cfg.levels, cfg.seed, move |d| {
            Ok(corrected_fit(d, &link_for_boot, &model, &opts_for_boot)?.theta_hat)
        })
        .map_err(classify)?;
        Some(BootstrapSummary {
            b: result.b,
            failed_replicates: result.failed_replicates,
            high_failure_warning: result.high_failure_warning,
            intervals: result.intervals,
        })
    } else {
        None
    };

    ensure_out(out)?;
    let converged = corrected.converged && naive.converged;
    let output = EstimateOutput {
        model: cfg.model.name().to_string(),
        link: link.name().to_string(),
        grid: cfg.grid,
        seed: cfg.seed,
        n1: data.n1(),
        n2: data.n2(),
        n_r: data.n_r(),
        attrition_rate: data.attrition_rate(),
        corrected,
        naive,
        bootstrap,
    };
    write_json(&out.join("estimate.json"), &output)?;
    if !converged {
        return Err(CliError::Numerical(
            "estimation did not converge; see estimate.json for the best point".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct StudyOutput {
    seed: u64,
    n1: usize,
    n2: usize,
    n_r: usize,
    theta_true: Vec<f64>,
    theta_true_se: f64,
    realized_attrition: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kendall_tau: Option<f64>,
}

pub fn cmd_simulate(config_path: &Path, out: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg: SimulateConfig = config::load(config_path).map_err(CliError::Input)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = ov.threads {
        cfg.threads = threads;
    }
    init_threads(cfg.threads);
    cfg.dgp.validate().map_err(|e| classify(e.into()))?;
    let study = simulate(&cfg.dgp, cfg.n1, cfg.nr, cfg.seed).map_err(|e| classify(e.into()))?;
    let (_, theta_se) = cfg.dgp.true_theta();

    // dependence diagnostic for the continuous design: sample rank
    // correlation between the copula coordinates among stayers
    let kendall = match &cfg.dgp {
        DgpSpec::Copula(_) => {
            let u: Vec<f64> = study.panel.stayers().map(|r| r.z1[0]).collect();
            let v: Vec<f64> = study
                .panel
                .stayers()
                .map(|r| r.z2.as_ref().expect("stayer")[0])
                .collect();
            (u.len() >= 2).then(|| kendall_tau(&u, &v))
        }
        DgpSpec::Discrete(_) => None,
    };

    ensure_out(out)?;
    let panel_file = File::create(out.join("panel.csv"))
        .map_err(|e| CliError::Input(format!("cannot write panel.csv: {e}")))?;
    write_panel_csv(&study.panel, panel_file)
        .map_err(|e| CliError::Input(format!("cannot write panel.csv: {e}")))?;
    let refresh_file = File::create(out.join("refreshment.csv"))
        .map_err(|e| CliError::Input(format!("cannot write refreshment.csv: {e}")))?;
    write_refreshment_csv(&study.refreshment, refresh_file)
        .map_err(|e| CliError::Input(format!("cannot write refreshment.csv: {e}")))?;
    write_json(
        &out.join("study.json"),
        &StudyOutput {
            seed: cfg.seed,
            n1: study.panel.n1(),
            n2: study.panel.n2(),
            n_r: study.refreshment.n_r(),
            theta_true: study.theta_true.clone(),
            theta_true_se: theta_se,
            realized_attrition: study.realized_attrition,
            kendall_tau: kendall,
        },
    )
}

pub fn cmd_replicate(
    design: &str,
    reps: Option<usize>,
    out: &Path,
    ov: &Overrides,
) -> Result<(), CliError> {
    let mut cfg: McConfig = designs::by_name(design).ok_or_else(|| {
        CliError::Input(format!(
            "unknown design '{design}'; valid designs: {}",
            designs::DESIGN_NAMES.join(", ")
        ))
    })?;
    if let Some(reps) = reps {
        cfg.replications = reps;
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = ov.threads {
        init_threads(threads);
    }
    if let Some(grid) = &ov.grid {
        cfg.grid = parse_grid(grid)?;
    }
    let report = run_mc(&cfg, true).map_err(classify)?;

    ensure_out(out)?;
    for (format, name) in [
        (ReportFormat::Json, "report.json"),
        (ReportFormat::Csv, "report.csv"),
        (ReportFormat::Markdown, "report.md"),
    ] {
        let mut file = File::create(out.join(name))
            .map_err(|e| CliError::Input(format!("cannot write {name}: {e}")))?;
        emit_report(&report, format, &mut file)
            .map_err(|e| CliError::Input(format!("cannot write {name}: {e}")))?;
    }
    let mut stdout = std::io::stdout();
    emit_report(&report, ReportFormat::Markdown, &mut stdout)
        .map_err(|e| CliError::Input(format!("cannot write report: {e}")))?;
    Ok(())
}

#[derive(Serialize)]
struct CalibrateOutput {
    target_attrition: f64,
    achieved_attrition: f64,
    intercept: f64,
    dgp: DgpSpec,
}

pub fn cmd_calibrate(config_path: &Path, out: &Path, draws: Option<usize>) -> Result<(), CliError> {
    let cfg: CalibrateConfig = config::load(config_path).map_err(CliError::Input)?;
    let draws = draws.unwrap_or(cfg.draws);
    let calibrated = calibrate_attrition_with(&cfg.dgp, cfg.target_attrition, cfg.tol, draws)
        .map_err(|e| classify(e.into()))?;
    let achieved = match &calibrated {
        DgpSpec::Discrete(d) => 1.0 - d.implied_stay_rate().map_err(|e| classify(e.into()))?,
        DgpSpec::Copula(c) => 1.0 - c.implied_stay_rate(draws),
    };
    ensure_out(out)?;
    write_json(
        &out.join("calibrated.json"),
        &CalibrateOutput {
            target_attrition: cfg.target_attrition,
            achieved_attrition: achieved,
            intercept: calibrated.intercept(),
            dgp: calibrated,
        },
    )
}
