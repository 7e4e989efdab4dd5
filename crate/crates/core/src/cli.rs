//! `covsteer` command-line interface.
//!
//! Exit status: 0 on success, 1 when the solver fails (or a gradient audit
//! does not pass), 2 for usage and configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::experiment::{
    check_gradient, emit, grad_check_json, run_lambda_sweep, run_reproduction, sweep_csv,
};
use crate::linalg::SquareMatrix;
use crate::output::Artifact;
use crate::steering::SolveStatus;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "covsteer",
    version,
    about = "Sparse structural covariance steering for linear stochastic systems",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Run the proximal gradient solver and write the iteration trace and result
    Solve,
    /// Solve once per lambda in `sweep.lambda_values` and write a summary table
    Sweep,
    /// Solve, then sample trajectories with and without the intervention and project them
    Simulate,
    /// Compare the adjoint gradient at the initial guess with central finite differences
    CheckGrad,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Experiment configuration file (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "./out")]
    pub out: PathBuf,

    /// Override a config value, e.g. `--set solver.lambda=0.3` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Maximum number of parallel solves during a sweep
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,

    /// Override sampling.rng_seed
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<u64>,
}

/// Parse arguments and run; returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
            } else {
                let _ = write!(stdout, "{rendered}");
            }
            return code;
        }
    };
    execute(&cli, stdout, stderr)
}

fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let common = &cli.common;
    let Some(path) = &common.config else {
        let _ = writeln!(stderr, "error: --config PATH is required");
        return EXIT_CONFIG;
    };
    if common.jobs == 0 {
        let _ = writeln!(stderr, "error: --jobs must be at least 1");
        return EXIT_CONFIG;
    }
    let mut config = match ExperimentConfig::load(path, &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }

    match cli.command {
        Command::Solve | Command::Simulate => {
            let sampling = cli.command == Command::Simulate;
            let rep = match run_reproduction(&config, sampling) {
                Ok(r) => r,
                Err(e) => {
                    let _ = writeln!(stderr, "solver failed: {e}");
                    return EXIT_SOLVER;
                }
            };
            if let Err(code) = write_out(&common.out, &rep.artifacts, stderr) {
                return code;
            }
            let r = &rep.result;
            let _ = writeln!(
                stdout,
                "status={} iterations={} J={} nnz={} l1_norm={} budget_satisfied={}",
                r.status.as_str(),
                r.iterations(),
                r.j_final,
                r.nonzero_count(),
                r.l1_norm(),
                r.budget_satisfied
            );
            if let Some(p) = &rep.projection {
                for (label, pts) in &p.projected {
                    let _ = writeln!(
                        stdout,
                        "{}: fraction inside {}% ellipsoid = {}",
                        label.as_str(),
                        100.0 * config.sampling.coverage,
                        p.fraction_inside(pts)
                    );
                }
            }
            if r.status == SolveStatus::StalledUnstable {
                let _ = writeln!(
                    stderr,
                    "solver stalled: backtracking could not find a stable descent step"
                );
                return EXIT_SOLVER;
            }
            EXIT_OK
        }
        Command::Sweep => {
            let rows = match run_lambda_sweep(&config, common.jobs) {
                Ok(r) => r,
                Err(e) => {
                    let _ = writeln!(stderr, "sweep failed: {e}");
                    return EXIT_SOLVER;
                }
            };
            let table = sweep_csv(&rows);
            if let Err(code) = write_out(
                &common.out,
                &[Artifact::new("sweep.csv", table.clone())],
                stderr,
            ) {
                return code;
            }
            let _ = write!(stdout, "{table}");
            let failed: Vec<_> = rows.iter().filter(|r| r.outcome.is_err()).collect();
            if failed.is_empty() {
                EXIT_OK
            } else {
                for r in failed {
                    if let Err(msg) = &r.outcome {
                        let _ = writeln!(stderr, "lambda={}: {msg}", r.lambda);
                    }
                }
                EXIT_SOLVER
            }
        }
        Command::CheckGrad => {
            let n = config.problem.dim();
            let u = config
                .solver
                .u0
                .clone()
                .unwrap_or_else(|| SquareMatrix::zeros(n));
            let report = match check_gradient(&config, &u) {
                Ok(r) => r,
                Err(e) => {
                    let _ = writeln!(stderr, "gradient check failed: {e}");
                    return EXIT_SOLVER;
                }
            };
            let doc = grad_check_json(&config, &report);
            if let Err(code) = write_out(
                &common.out,
                &[Artifact::new("check_grad.json", doc)],
                stderr,
            ) {
                return code;
            }
            let _ = writeln!(
                stdout,
                "max relative deviation {:e} over {} entries (tolerance {:e}): {}",
                report.max_relative_deviation,
                report.entries_compared,
                report.tolerance,
                if report.passed { "PASS" } else { "FAIL" }
            );
            if report.passed {
                EXIT_OK
            } else {
                EXIT_SOLVER
            }
        }
    }
}

fn write_out(
    dir: &std::path::Path,
    artifacts: &[Artifact],
    stderr: &mut dyn Write,
) -> Result<(), i32> {
    emit(dir, artifacts).map(|_| ()).map_err(|e| {
        let _ = writeln!(stderr, "error: {e}");
        EXIT_CONFIG
    })
}
