//! Library surface of the `tif` command: config parsing/validation, the
//! pipeline stages behind each subcommand, and report rendering. Exposed as
//! a library so integration tests drive the same code paths as the binary.

pub mod config;
pub mod pipeline;
pub mod plot;

use tif_core::error::Error;

/// Exit code contract: 0 success, 1 validation error, 2 runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Schema(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}
