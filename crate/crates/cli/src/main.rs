use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rdm_lab::{configure_threads, error_exit_code, load_config, Outcome, SweepAxis, EXIT_CONFIG};

#[derive(Parser)]
#[command(
    name = "rdm-lab",
    version,
    about = "Reduced density matrices of a system coupled to an environment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage at every configured point.
    Run { config: PathBuf },
    /// Vary one parameter, holding the others at their first configured value.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Check the exact identities only.
    Verify { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    Delta,
    Epsilon,
    #[value(name = "env_size", alias = "env-size")]
    EnvSize,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Lambda => SweepAxis::Lambda,
            Axis::Delta => SweepAxis::Delta,
            Axis::Epsilon => SweepAxis::Epsilon,
            Axis::EnvSize => SweepAxis::EnvSize,
        }
    }
}

fn report(outcome: &Outcome) -> i32 {
    for f in &outcome.files {
        println!("wrote {} ({} bytes, sha256 {})", f.path, f.bytes, f.sha256);
    }
    if outcome.bound_violations > 0 {
        println!("bound violations: {}", outcome.bound_violations);
    }
    for f in &outcome.failures {
        eprintln!("identity failure: {f}");
    }
    outcome.exit_code()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(std::env::var("RDM_LAB_THREADS").ok().as_deref()) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG as u8);
    }
    let (path, axis) = match &cli.command {
        Command::Run { config } | Command::Verify { config } => (config, None),
        Command::Sweep { config, axis } => (config, Some(SweepAxis::from(*axis))),
    };
    let result = load_config(path).and_then(|cfg| match (&cli.command, axis) {
        (Command::Run { .. }, _) => rdm_lab::run(&cfg),
        (Command::Verify { .. }, _) => rdm_lab::verify(&cfg),
        (Command::Sweep { .. }, Some(axis)) => rdm_lab::sweep(&cfg, axis),
        (Command::Sweep { .. }, None) => unreachable!(),
    });
    let code = match result {
        Ok(outcome) => report(&outcome),
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
