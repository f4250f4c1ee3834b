use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spo_core::commands::{
    cmd_experiment, cmd_gen_data, cmd_gradcheck, cmd_solve_once, config_from_manifest, read_solve_input,
};
use spo_core::config::{apply_override, RunConfig};
use spo_core::SpoError;

/// Decision-focused vehicle relocation: data generation, single solves,
/// gradient checks and the regime comparison.
#[derive(Parser)]
#[command(name = "spo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Take the configuration recorded in a previous run's manifest.json.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Override a config value, e.g. `--set relocation.budget=800`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for `--set output_dir=DIR`.
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic demand series, grid and targets.
    GenData(Common),
    /// Solve one relocation instance given as JSON.
    SolveOnce {
        instance: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every gradient path.
    Gradcheck(Common),
    /// Train SPO-A and PTO, evaluate all regimes, write the comparison.
    Experiment(Common),
}

fn load(common: &Common) -> Result<RunConfig, SpoError> {
    let mut overrides = common.overrides.clone();
    if let Some(dir) = &common.output_dir {
        overrides.push(format!("output_dir={}", toml_string(&dir.display().to_string())));
    }
    match &common.manifest {
        Some(path) => {
            let base = config_from_manifest(path)?;
            let mut table = toml::Table::try_from(base).expect("config serializes");
            for o in &overrides {
                apply_override(&mut table, o)?;
            }
            RunConfig::from_toml_str(&toml::to_string(&table).expect("table serializes"))
        }
        None => RunConfig::load(common.config.as_deref(), &overrides),
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn emit<T: serde::Serialize + std::fmt::Display>(report: &T, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
    } else {
        print!("{report}");
        if !report.to_string().ends_with('\n') {
            println!();
        }
    }
}

fn run(cli: Cli) -> Result<u8, SpoError> {
    match cli.command {
        Command::GenData(common) => {
            let report = cmd_gen_data(&load(&common)?)?;
            emit(&report, common.json);
            Ok(0)
        }
        Command::SolveOnce { instance, common } => {
            let cfg = load(&common)?;
            let report = cmd_solve_once(&cfg, &read_solve_input(&instance)?)?;
            emit(&report, common.json);
            Ok(if report.converged() { 0 } else { 3 })
        }
        Command::Gradcheck(common) => {
            let report = cmd_gradcheck(&load(&common)?)?;
            emit(&report, common.json);
            Ok(if report.passed() { 0 } else { 2 })
        }
        Command::Experiment(common) => {
            let report = cmd_experiment(&load(&common)?)?;
            emit(&report, common.json);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
