//! Command-line driver: single runs, amplitude sweeps, refinement studies and
//! initial-condition audits.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use kesim::harness::{self, ExitStatus, RunConfig};
use kesim::{Error, Execution};

#[derive(Parser)]
#[command(name = "kesim", version, about = "Compressible k-epsilon perturbation simulator")]
struct Cli {
    /// Run sweeps and refinements one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Advance the configured initial condition and write series and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `ic.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One run per amplitude, each in its own subdirectory.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        amplitudes: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temporal order over fixed steps, or audit residuals over resolutions.
    #[command(group(ArgGroup::new("levels").required(true).args(["dts", "resolutions"])))]
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        dts: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the configured identity audits on the initial condition.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &PathBuf, out: Option<PathBuf>) -> kesim::Result<RunConfig> {
    let mut cfg = harness::parse_config(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> kesim::Result<u8> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load(&config, out)?;
            if let Some(seed) = seed {
                cfg.ic.seed = seed;
            }
            let outcome = harness::run_experiment(&cfg)?;
            let s = &outcome.summary;
            println!("status: {:?} after {} steps, t = {}", s.exit_status, s.steps, s.t_final);
            match &s.apriori {
                Some(a) => println!(
                    "observed C = {:.6e}, max E/E(0) = {:.6e}",
                    a.observed_c, a.max_energy_ratio
                ),
                None => println!(
                    "a priori summary unavailable: {}",
                    s.apriori_error.as_deref().unwrap_or("")
                ),
            }
            println!("outputs in {}", cfg.output.dir.display());
            Ok(s.exit_code as u8)
        }
        Command::Sweep {
            config,
            amplitudes,
            out,
        } => {
            let cfg = load(&config, out)?;
            let table = harness::sweep_amplitude(&cfg, &amplitudes, exec)?;
            println!(
                "{:>12} {:>14} {:>14} {:>16}",
                "amplitude", "observed_C", "max E/E0", "status"
            );
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_else(|| "-".into());
            for r in &table.rows {
                println!(
                    "{:>12.4e} {:>14} {:>14} {:>16}",
                    r.amplitude,
                    fmt(r.observed_c),
                    fmt(r.max_energy_ratio),
                    format!("{:?}", r.exit_status)
                );
            }
            for (i, j) in &table.trend_violations {
                println!(
                    "note: observed_C decreases from amplitude {} to {}",
                    table.rows[*i].amplitude, table.rows[*j].amplitude
                );
            }
            Ok(0)
        }
        Command::Refine {
            config,
            dts,
            resolutions,
            out,
        } => {
            let cfg = load(&config, out)?;
            let table = harness::refinement_study(&cfg, &resolutions, &dts, exec)?;
            for row in &table.resolutions {
                for a in &row.audits {
                    println!("n = {:>4} {:<14} residual/scale = {:.3e}", row.n, a.name, a.relative());
                }
            }
            if let Some(t) = &table.time {
                for (i, p) in t.orders.iter().enumerate() {
                    println!("dt = {:e} .. {:e}: observed order {:.4}", t.dts[i], t.dts[i + 2], p);
                }
            }
            Ok(0)
        }
        Command::Audit { config } => {
            let cfg = load(&config, None)?;
            let reports = harness::audit_initial_condition(&cfg)?;
            let mut all = true;
            for r in &reports {
                all &= r.pass;
                println!(
                    "{} {:<14} left = {:+.6e} right = {:+.6e} residual/scale = {:.3e}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.left,
                    r.right,
                    r.relative()
                );
            }
            Ok(if all { 0 } else { ExitStatus::StepFailure.code() as u8 })
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 1; clap's own default (2) means a guard violation here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Inadmissible(_) => ExitStatus::GuardViolation.code(),
                Error::NonFinite(_) | Error::NonPositiveDensity(_) | Error::Vacuum { .. } => {
                    ExitStatus::StepFailure.code()
                }
                _ => 1,
            };
            ExitCode::from(code as u8)
        }
    }
}
