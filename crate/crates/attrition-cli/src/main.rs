//! Command line interface for the attrition correction estimator.

mod commands;
mod config;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{cmd_calibrate, cmd_estimate, cmd_replicate, cmd_simulate, Overrides};

const CONFIG_HELP: &str = "\
CONFIGURATION KEYS

estimate config (TOML; unknown keys are errors):
  panel         path to the panel CSV: id,w,z1_1..z1_d,z2_1..z2_d (required)
  refreshment   path to the refreshment CSV: z2_1..z2_d (required)
  link          'logit' or 'exp' (default: logit)
  grid          'paper-tuples' or 'full-product' (default: paper-tuples)
  seed          base seed for all randomness (default: 0)
  bootstrap     bootstrap replicates, 0 disables intervals (default: 0)
  levels        confidence levels (default: [0.90, 0.95])
  tol           moment-norm convergence tolerance (default: 1e-8)
  max-iter      solver iteration cap (default: 60)
  threads       worker threads, 0 = logical CPUs (default: 0)
  [model]       name = 'mean' | 'product-moment' | 'cond-prob' | 'twoway-fe'
                cond-prob also takes a, b; twoway-fe takes x-indices, y-index

simulate config:
  n1, nr        panel and refreshment sizes (required)
  seed          base seed (default: 0)
  threads       worker threads (default: 0)
  [dgp]         kind = 'discrete': m, transition, c1, c2, intercept, link
                kind = 'copula': nu, mu1, mu2, c1, c2, intercept, link,
                and optional lattice-cells (200), lattice-quantile (0.9999)

calibrate config:
  target-attrition  attrition rate in (0,1) (required)
  tol               rate tolerance (default: 1e-4)
  draws             quadrature draws, continuous designs (default: 1000000)
  [dgp]             as for simulate; the intercept is replaced

OUTPUTS
  estimate   <out>/estimate.json
  simulate   <out>/panel.csv, refreshment.csv, study.json
  replicate  <out>/report.json, report.csv, report.md (markdown on stdout)
  calibrate  <out>/calibrated.json

EXIT CODES
  0 success, 1 input or configuration error, 2 numerical failure.
";

#[derive(Parser)]
#[command(
    name = "attrition",
    version,
    about = "Correct nonrandom panel attrition with a refreshment sample",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the corrected and naive targets from panel and refreshment CSVs
    Estimate {
        /// TOML configuration file (see --help for the key reference)
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the thread count (0 = logical CPUs)
        #[arg(long)]
        threads: Option<usize>,
        /// Override the grid strategy: paper-tuples | full-product
        #[arg(long)]
        grid: Option<String>,
        /// Override the link: logit | exp
        #[arg(long)]
        link: Option<String>,
        /// Override the bootstrap replicate count
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Draw a synthetic study from a configured design
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a shipped Monte Carlo design and emit its report
    Replicate {
        /// One of: table1-m5, table1-m10, table1-m15, table2-nu2, table2-nu10, table2-nu20
        design: String,
        /// Override the replication count
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Override the design's grid strategy
        #[arg(long)]
        grid: Option<String>,
    },
    /// Find the attrition intercept hitting a target rate
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the quadrature draw count
        #[arg(long)]
        draws: Option<usize>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };

    let result = match &cli.command {
        Command::Estimate {
            config,
            out,
            seed,
            threads,
            grid,
            link,
            bootstrap,
        } => cmd_estimate(
            config,
            out,
            &Overrides {
                seed: *seed,
                threads: *threads,
                grid: grid.clone(),
                link: link.clone(),
                bootstrap: *bootstrap,
            },
        ),
        Command::Simulate {
            config,
            out,
            seed,
            threads,
        } => cmd_simulate(
            config,
            out,
            &Overrides {
                seed: *seed,
                threads: *threads,
                ..Default::default()
            },
        ),
        Command::Replicate {
            design,
            reps,
            out,
            seed,
            threads,
            grid,
        } => cmd_replicate(
            design,
            *reps,
            out,
            &Overrides {
                seed: *seed,
                threads: *threads,
                grid: grid.clone(),
                ..Default::default()
            },
        ),
        Command::Calibrate { config, out, draws } => cmd_calibrate(config, out, *draws),
    };

    if let Err(err) = result {
        eprintln!("error: {}", err.message());
        std::process::exit(err.code());
    }
}
