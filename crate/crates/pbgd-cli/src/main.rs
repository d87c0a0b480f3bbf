use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use pbgd_cli::config::{ExperimentConfig, RawConfig};
use pbgd_cli::reproduce::{reproduce, ReproduceTarget};
use pbgd_cli::runner::{run, sweep};
use pbgd_cli::HarnessError;

/// Penalty-based bilevel optimization experiments.
#[derive(Parser)]
#[command(name = "pbgd", version, about)]
struct Cli {
    /// Output directory (overrides the config file's `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Reserved: every run is deterministic, no RNG exists.
    #[arg(long, global = true, action = ArgAction::SetTrue, num_args = 0)]
    seedless: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment described by a config file.
    Run { config: PathBuf },
    /// Re-run a packaged experiment: example1, bounds, flatness, or toy_peft.
    Reproduce { target: String },
    /// Run the config once per value of a numeric parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated list of values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
}

fn real_main(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(out) = cli.out {
                cfg.output_dir = out;
            }
            let artifacts = run(&cfg)?;
            println!(
                "run complete: {} records -> {}",
                artifacts.records.len(),
                artifacts.output_dir.display()
            );
            Ok(true)
        }
        Command::Reproduce { target } => {
            let Some(target) = ReproduceTarget::from_name(&target) else {
                return Err(HarnessError::Config(format!(
                    "unknown reproduce target `{target}` (expected example1, bounds, flatness, toy_peft)"
                )));
            };
            let out = cli
                .out
                .unwrap_or_else(|| PathBuf::from(format!("reproduce_{}", target.as_str())));
            let outcome = reproduce(target, &out)?;
            for a in &outcome.assertions {
                println!(
                    "{} {} {}",
                    a.id,
                    if a.passed { "PASS" } else { "FAIL" },
                    a.detail
                );
            }
            println!("artifacts -> {}", outcome.output_dir.display());
            Ok(outcome.all_passed())
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let raw = RawConfig::from_file(&config)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("sweep"));
            let outcome = sweep(&raw, &param, &values, &out)?;
            for (value, status) in &outcome.runs {
                match status {
                    None => println!("{param} = {value}: ok"),
                    Some(err) => println!("{param} = {value}: FAILED ({err})"),
                }
            }
            if let Some(err) = outcome.first_failure {
                return Err(err);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // assertion failures exit with 4
        Ok(false) => ExitCode::from(4),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
