//! Command-line front end: run one experiment from a JSON config, or sweep
//! a grid of overrides. Errors print machine-readable JSON on stderr and
//! map to stable exit codes.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use qsee::harness;
use qsee::Error;

#[derive(Parser)]
#[command(
    name = "qsee",
    version,
    about = "Localized stochastic evolution simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON configuration file.
    Run {
        /// Path to the experiment configuration.
        config: PathBuf,
        /// Output directory for results.csv, series files, and the manifest.
        #[arg(long, default_value = "qsee_out")]
        out: PathBuf,
        /// Override the noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of paths.
        #[arg(long)]
        paths: Option<usize>,
        /// Dotted-key override, e.g. --override noise.dt=5e-5. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a cartesian sweep of configuration overrides.
    Sweep {
        /// Path to the base experiment configuration.
        config: PathBuf,
        /// Root output directory; each point gets point_NNNN under it.
        #[arg(long, default_value = "qsee_sweep")]
        out: PathBuf,
        /// Sweep axis, e.g. --set noise.dt=1e-4,5e-5. Repeatable.
        #[arg(long = "set", value_name = "KEY=V1,V2", required = true)]
        sets: Vec<String>,
        /// Override the noise seed in the base configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of paths in the base configuration.
        #[arg(long)]
        paths: Option<usize>,
    },
}

fn init_threads() {
    if let Ok(raw) = std::env::var("QSEE_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
        }
    }
}

fn apply_common_overrides(
    value: &mut serde_json::Value,
    seed: Option<u64>,
    paths: Option<usize>,
) -> Result<(), Error> {
    if let Some(s) = seed {
        harness::set_config_key(value, "noise.seed", serde_json::json!(s))?;
    }
    if let Some(p) = paths {
        harness::set_config_key(value, "n_paths", serde_json::json!(p))?;
    }
    Ok(())
}

fn real_main() -> Result<i32, Error> {
    init_threads();
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            paths,
            overrides,
        } => {
            let mut value = harness::load_config_value(&config)?;
            apply_common_overrides(&mut value, seed, paths)?;
            for assignment in &overrides {
                harness::apply_assignment(&mut value, assignment)?;
            }
            let cfg = harness::config_from_value(value)?;
            let summary = harness::run(&cfg, &out)?;
            println!(
                "{}",
                serde_json::json!({ "out": out.display().to_string(), "summary": summary })
            );
            Ok(0)
        }
        Command::Sweep {
            config,
            out,
            sets,
            seed,
            paths,
        } => {
            let mut value = harness::load_config_value(&config)?;
            apply_common_overrides(&mut value, seed, paths)?;
            let outcome = harness::sweep(&value, &sets, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out.display().to_string(),
                    "points": outcome.n_points,
                    "worst_exit": outcome.worst_exit,
                })
            );
            Ok(outcome.worst_exit)
        }
    }
}

fn main() {
    match real_main() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "exit_code": code })
            );
            std::process::exit(code);
        }
    }
}
