//! Experiment harness for committee distillation: trains teachers, runs the
//! committee method and its baselines over seeds, and renders comparison
//! tables and importance dumps.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod improvement;
pub mod report;

pub use commands::{execute, matrix_runs};
pub use config::{Cli, CliCommand, Command, DatasetSource, ExperimentConfig, Method};
pub use error::{CliError, Result};
pub use experiment::{committee_label, MethodRun, SeedContext};
pub use improvement::{improvement_percent, Direction};
pub use report::Table;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        CliCommand::Report(args) => commands::cmd_report(&args).map(|_| ()),
        CliCommand::Run(a) => ExperimentConfig::from_args(Command::Run, &a).and_then(|c| execute(&c).map(|_| ())),
        CliCommand::Matrix(a) => ExperimentConfig::from_args(Command::Matrix, &a).and_then(|c| execute(&c).map(|_| ())),
        CliCommand::ImportanceDump(a) => {
            ExperimentConfig::from_args(Command::ImportanceDump, &a).and_then(|c| execute(&c).map(|_| ()))
        }
        CliCommand::Teachers(a) => {
            ExperimentConfig::from_args(Command::Teachers, &a).and_then(|c| execute(&c).map(|_| ()))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
