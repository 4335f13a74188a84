//! Command-line front end: config parsing and the command implementations.

pub mod commands;
pub mod config;

pub use commands::{InferTarget, SweepKind};
pub use config::RunConfig;

/// Process exit code for an error: 2 when an internal consistency check
/// failed, 1 for every invalid input.
pub fn exit_code(error: &ddnn::Error) -> u8 {
    match error {
        ddnn::Error::Invariant(_) => 2,
        _ => 1,
    }
}
