use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use r3_cli::commands::{self, RunOverrides};
use r3_core::experiment::Method;

#[derive(Parser)]
#[command(name = "r3", version, about = "Review-remask-refine decoding experiments")]
struct Cli {
    /// Log filter, e.g. `info` or `r3_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json, report.txt and traces.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        compare: Option<Method>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one JSONL trace per trial.
        #[arg(long)]
        trace: bool,
    },
    /// Re-check the remask events of a trace and print its correction cycles.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run the built-in consistency checks on the toy world.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();

    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Run {
            config,
            method,
            compare,
            trials,
            seed,
            out,
            trace,
        } => {
            let ov = RunOverrides {
                method,
                compare,
                trials,
                seed,
                out,
                trace,
            };
            let cfg = commands::load_config(config.as_deref(), &ov)?;
            let report = commands::run(&cfg)?;
            print!("{}", report.table());
            Ok(true)
        }
        Command::Replay { trace } => {
            let summary = commands::replay_file(&trace)?;
            print!("{}", commands::render_replay(&summary));
            Ok(summary.is_consistent())
        }
        Command::Selftest => {
            let checks = commands::selftest();
            print!("{}", commands::render_checks(&checks));
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}
