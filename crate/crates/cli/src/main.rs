use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mrsde_cli::{execute, exit_code, Command, RunConfig};

#[derive(Parser)]
#[command(name = "mrsde", version, about = "Mean-reverting SDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Options {
    /// `--config FILE` followed by `--section.key value` overrides
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    options: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Forward ensemble moments next to the closed-form marginals
    Simulate(Options),
    /// Cocycle identity check on shared noise paths
    Cocycle(Options),
    /// Terminal-discrepancy bound with Monte Carlo validation
    Tdd(Options),
    /// Train conditioned score nets and restore held-out toy signals
    TrainRestore(Options),
    /// Reverse-sampler variant comparison on a Gaussian toy
    Compare(Options),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (command, opts) = match cli.command {
        Cmd::Simulate(o) => (Command::Simulate, o),
        Cmd::Cocycle(o) => (Command::Cocycle, o),
        Cmd::Tdd(o) => (Command::Tdd, o),
        Cmd::TrainRestore(o) => (Command::TrainRestore, o),
        Cmd::Compare(o) => (Command::Compare, o),
    };
    let result = RunConfig::from_args(command, &opts.options).and_then(|run| {
        let files = execute(&run)?;
        Ok((run, files))
    });
    match result {
        Ok((run, files)) => {
            let dir = run.output_dir().expect("validated");
            for f in files {
                println!("{}", dir.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
