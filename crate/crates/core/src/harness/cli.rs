//! `fedln` command line. Exit codes: 0 success, 2 configuration or usage
//! error, 1 runtime error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{
    gen_data, inject_noise, load_scenario, report, run_estimation, run_scenario, sweep,
    sweep_cells, write_estimation, write_training, GridAxis, Scenario,
};
use crate::error::{Error, Result};
use crate::estimation::EstimationMethod;
use crate::fed::RunOptions;

#[derive(Debug, Parser)]
#[command(name = "fedln", version, about = "Federated learning under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario JSON document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the scenario's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threads for client computation. Never changes results.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Knn,
    Confidence,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    GenData(Common),
    /// Corrupt the training labels and write the realized matrices.
    InjectNoise(Common),
    /// Run one estimation round and write the per-client estimates.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Knn)]
        method: Method,
    },
    /// Run the full experiment.
    Train(Common),
    /// Convert round CSVs under a directory to long format.
    Report {
        /// Directory searched for `rounds.csv` and `*.rounds.csv`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a grid of noise settings, strategies and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis values, e.g. `nl=0,0.2,0.4`; axes are nl, ns and frac.
        #[arg(long)]
        grid: Vec<String>,
        /// Comma-separated: fedavg, nnc, na_fedavg, akd, fedln, fedln_full.
        #[arg(long, default_value = "fedavg,fedln")]
        strategies: String,
        /// Comma-separated seeds; defaults to the scenario's seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Cells run concurrently. Output bytes do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Run with `argv` (including the program name) and return the exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn load(common: &Common) -> Result<(Scenario, PathBuf)> {
    let scenario = load_scenario(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| scenario.output_dir.clone());
    Ok((scenario, out))
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        workers: common.workers,
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Config {
                pointer: flag.into(),
                message: format!("cannot parse {s:?}"),
            })
        })
        .collect()
}

fn parse_grid(specs: &[String]) -> Result<Vec<(GridAxis, Vec<f64>)>> {
    specs
        .iter()
        .map(|spec| {
            let bad = |message: String| Error::Config {
                pointer: "--grid".into(),
                message,
            };
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| bad(format!("expected axis=v1,v2,... in {spec:?}")))?;
            let axis = GridAxis::parse(key.trim())
                .ok_or_else(|| bad(format!("unknown axis {key:?}; expected nl, ns or frac")))?;
            Ok((axis, parse_list(values, "--grid")?))
        })
        .collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            let (scenario, out) = load(&common)?;
            gen_data(&scenario, &out)?;
        }
        Command::InjectNoise(common) => {
            let (scenario, out) = load(&common)?;
            inject_noise(&scenario, &out)?;
        }
        Command::Estimate { common, method } => {
            let (scenario, out) = load(&common)?;
            let method = match method {
                Method::Knn => EstimationMethod::Knn,
                Method::Confidence => EstimationMethod::Confidence,
            };
            let (resolved, output) = run_estimation(&scenario, method, options(&common))?;
            write_estimation(&resolved, &output, &out)?;
            if let Some(mae) = output.summary.estimation_mae {
                println!("estimation MAE: {mae:.4}");
            }
        }
        Command::Train(common) => {
            let (scenario, out) = load(&common)?;
            let output = run_scenario(&scenario, options(&common))?;
            write_training(&scenario, &output, &out, "")?;
            println!("final accuracy: {:.4}", output.summary.final_accuracy);
        }
        Command::Report { input, out } => {
            let file = if out.extension().is_some_and(|e| e == "csv") {
                out
            } else {
                out.join("long.csv")
            };
            let n = report(&input, &file)?;
            println!("{n} round files -> {}", display(&file));
        }
        Command::Sweep {
            common,
            grid,
            strategies,
            seeds,
            jobs,
        } => {
            let (scenario, out) = load(&common)?;
            let grid = parse_grid(&grid)?;
            let strategies: Vec<String> = parse_list(&strategies, "--strategies")?;
            let seeds = match seeds {
                Some(s) => parse_list(&s, "--seeds")?,
                None => vec![scenario.seed],
            };
            let cells = sweep_cells(&scenario, &grid, &strategies, &seeds)?;
            sweep(&cells, &out, jobs, common.workers)?;
            println!("{} cells -> {}", cells.len(), display(&out));
        }
    }
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}
