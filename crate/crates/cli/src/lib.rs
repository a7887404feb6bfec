//! Configuration, checkpoints and the experiment commands behind the
//! `chunkstream` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use config::RunConfig;

use chunkstream::Error;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Configuration(_) | Error::Conditioning(_) | Error::LateSwitch { .. } | Error::Json(_) => 2,
        Error::Numeric(_) | Error::OracleInvalid(_) => 3,
        Error::Invariant(_) | Error::StreamingOrder(_) | Error::Contract(_) | Error::DegenerateMask { .. } => 4,
        Error::Dimension(_) | Error::UndefinedCorrelation(_) | Error::Format(_) | Error::Io(_) => 1,
    }
}
