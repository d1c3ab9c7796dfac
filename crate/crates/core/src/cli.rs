//! Command-line front end. Exit status 0 on success, 1 for configuration
//! and input errors, 2 for numerical failures.

use crate::bandwidth::{optimal_bandwidths, rate_exponent, SmoothnessSpec};
use crate::error::{Error, Result};
use crate::estimator::{estimate_density_at_with, BandwidthVector, EstimatorOptions};
use crate::experiments::{
    init_threads, mse_study, prior_check, reference_model, stationarity_check, variance_study, ExperimentConfig,
    ResultTable, Study,
};
use crate::kernels::build_estimation_kernel;
use crate::model::{euler_maruyama_jump, PathRecord};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "jumpkde", version, about = "Jump-diffusion simulation and invariant-density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the reference model and write the path as CSV.
    Simulate {
        #[arg(long = "T")]
        t: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Jump intensity λ.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, value_delimiter = ',', default_value = "0,0,0")]
        x0: Vec<f64>,
        /// Destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Estimate the density at a point from a path CSV.
    Estimate {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, value_delimiter = ',')]
        h: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        x: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Rate-optimal bandwidths for a smoothness vector.
    Bandwidth {
        #[arg(long, value_delimiter = ',')]
        beta: Vec<f64>,
        #[arg(long = "T")]
        t: f64,
        #[arg(long, default_value_t = crate::bandwidth::DEFAULT_SLACK)]
        slack: f64,
    },
    /// Variance of the estimator over a bandwidth grid.
    VarianceStudy(StudyArgs),
    /// MSE against T for a model with known invariant density.
    MseStudy(StudyArgs),
    /// Checks on the lower-bound priors and their calibration.
    PriorCheck(CheckArgs),
    /// Stationarity residual of the prior drift under node doubling.
    StationarityCheck(CheckArgs),
}

#[derive(Debug, clap::Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the CSV destination of the config.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct CheckArgs {
    /// Built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_study(args: &StudyArgs, study: Study) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.study != study {
        return Err(Error::Config(format!("config is for {:?}, not {:?}", cfg.study, study)));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.output {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn load_check(args: &CheckArgs, study: Study) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::defaults(study),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn csv_destination(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_table(table: &ResultTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    table.write_csv(std::io::BufWriter::new(file))
}

#[derive(Serialize)]
struct StudyReport<'a, S: Serialize> {
    csv: &'a Path,
    fingerprint: &'a str,
    wall_time_s: f64,
    summary: &'a S,
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Simulate { t, dt, seed, lambda, x0, output } => {
            let model = reference_model(lambda)?;
            let path = euler_maruyama_jump(&model, &x0, t, dt, seed)?;
            match output {
                Some(p) => path.write_csv(std::io::BufWriter::new(std::fs::File::create(p)?)),
                None => path.write_csv(std::io::stdout().lock()),
            }
        }
        Command::Estimate { path, h, x, order, stride } => {
            let file = std::fs::File::open(&path)
                .map_err(|e| Error::Config(format!("cannot read path {}: {e}", path.display())))?;
            let record = PathRecord::read_csv(std::io::BufReader::new(file))?;
            let kernel = build_estimation_kernel(order)?;
            let est =
                estimate_density_at_with(&record, &kernel, &BandwidthVector::new(h)?, &x, EstimatorOptions { stride })?;
            print_json(&est)
        }
        Command::Bandwidth { beta, t, slack } => {
            let spec = SmoothnessSpec::unit_radii(beta)?;
            let plan = optimal_bandwidths(&spec, t, slack)?;
            #[derive(Serialize)]
            struct Out<'a> {
                beta: &'a [f64],
                #[serde(rename = "T")]
                t: f64,
                rate_exponent: f64,
                #[serde(flatten)]
                plan: &'a crate::bandwidth::BandwidthPlan,
            }
            print_json(&Out { beta: &spec.beta, t, rate_exponent: rate_exponent(&spec)?, plan: &plan })
        }
        Command::VarianceStudy(args) => {
            let cfg = load_study(&args, Study::VariancePlateau)?;
            let res = variance_study(&cfg)?;
            let dest = csv_destination(&cfg, "variance_plateau.csv");
            write_table(&res.table, &dest)?;
            let m = &res.table.metadata;
            print_json(&StudyReport {
                csv: &dest,
                fingerprint: &m.fingerprint,
                wall_time_s: m.wall_time_s,
                summary: &res.summary,
            })
        }
        Command::MseStudy(args) => {
            let cfg = load_study(&args, Study::MseRate)?;
            let res = mse_study(&cfg)?;
            let dest = csv_destination(&cfg, "mse_rate.csv");
            write_table(&res.table, &dest)?;
            let m = &res.table.metadata;
            print_json(&StudyReport {
                csv: &dest,
                fingerprint: &m.fingerprint,
                wall_time_s: m.wall_time_s,
                summary: &res.summary,
            })
        }
        Command::PriorCheck(args) => print_json(&prior_check(&load_check(&args, Study::PriorCheck)?)?),
        Command::StationarityCheck(args) => {
            print_json(&stationarity_check(&load_check(&args, Study::StationarityCheck)?)?)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
