use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meanfield_core::harness::{
    exit_code, run_convergence, run_experiment, schema_text, verify_bundle, ExperimentConfig, EXIT_INVARIANT,
};
use meanfield_core::Error;

#[derive(Parser)]
#[command(
    name = "meanfield",
    version,
    about = "Particle experiments for mean-field dynamics with singular forces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured N and write a bundle.
    Simulate {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare particle runs with the grid reference (d = 1).
    Converge {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check the invariants recorded in a bundle.
    Verify { bundle: PathBuf },
    /// Print the configuration template and output columns.
    PrintSchema,
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<i32, Error> {
    match cmd {
        Command::Simulate { config, out } => {
            let cfg = load(&config, out)?;
            let s = run_experiment(&cfg)?;
            for r in &s.runs {
                let gate = match &r.gate_first_violation {
                    Some(g) => format!("gate `{}` fails at t = {}", g.inequality, g.t),
                    None => "gates hold".to_string(),
                };
                println!(
                    "N = {:5}  eps = {:.5}  T_obs = {:.4}  mlinf violations = {}  {gate}",
                    r.resolved.n, r.resolved.epsilon, r.short_time_check.t_obs, r.mlinf_violations
                );
            }
            println!("bundle written to {}", cfg.output.dir.display());
            Ok(0)
        }
        Command::Converge { config, out } => {
            let cfg = load(&config, out)?;
            let t = run_convergence(&cfg)?;
            for (n, sup) in &t.fconv_by_n {
                let last = t.distances(*n).last().copied().unwrap_or(f64::NAN);
                println!("N = {n:5}  weak distance (T) = {last:.5e}  Fconv sup = {sup:.5e}");
            }
            println!(
                "decay exponents: weak {:?}, Fconv {:.3}",
                t.weak_exponent, t.fconv_exponent
            );
            if let Some(f) = t.grid_floor {
                println!("grid floor = {f:.3e}");
            }
            println!("table written to {}", cfg.output.dir.display());
            Ok(0)
        }
        Command::Verify { bundle } => {
            let rep = verify_bundle(&bundle)?;
            for c in &rep.checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if rep.passed() { 0 } else { EXIT_INVARIANT })
        }
        Command::PrintSchema => {
            print!("{}", schema_text());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
