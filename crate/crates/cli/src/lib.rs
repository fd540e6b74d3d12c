//! Experiment harness behind the `mrsde` binary: configuration, the toy
//! inverse problem and one driver per subcommand.

pub mod commands;
pub mod config;
pub mod toy;

pub use commands::execute;
pub use config::{Command, Config, RunConfig};
pub use toy::ToyInverseProblem;

/// Process exit code for a failed run: 2 for numeric failures, 1 otherwise.
pub fn exit_code(err: &mrsde::Error) -> u8 {
    if err.is_numeric() {
        2
    } else {
        1
    }
}
