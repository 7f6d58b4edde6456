use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvi_harness::checks::{check_gradients, selftest};
use cvi_harness::config::Config;
use cvi_harness::experiment::{run_experiment, RunOptions};
use cvi_harness::output::{compare_table, Summary};
use cvi_harness::HarnessError;

#[derive(Parser)]
#[command(name = "cvi", version, about = "Conjugate-computation variational inference runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its summary
    Run { config: String },
    /// Run several experiments and tabulate their summaries
    Compare {
        #[arg(required = true)]
        configs: Vec<String>,
    },
    /// Finite-difference and cross-estimator gradient checks
    CheckGradients {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Property battery
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let opts = RunOptions::from_env();
    match cli.command {
        Command::Run { config } => {
            let cfg = Config::from_file(&config)?;
            let out = run_experiment(&cfg, opts)?;
            print!("{}", out.summary.render());
        }
        Command::Compare { configs } => {
            let cfgs = configs.iter().map(|c| Config::from_file(c)).collect::<Result<Vec<_>, _>>()?;
            let summaries = cfgs.iter().map(|c| run_experiment(c, opts).map(|o| o.summary)).collect::<Result<Vec<Summary>, _>>()?;
            print!("{}", compare_table(&configs, &summaries));
        }
        Command::CheckGradients { samples, seed } => {
            if samples < 2 {
                return Err(HarnessError::Config("samples must be at least 2".into()));
            }
            let report = check_gradients(samples, seed);
            print!("{}", report.render());
            if !report.all_passed() {
                return Err(HarnessError::CheckFailed("gradient checks".into()));
            }
        }
        Command::Selftest { seed } => {
            let report = selftest(seed);
            print!("{}", report.render());
            if !report.all_passed() {
                return Err(HarnessError::CheckFailed("selftest".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
