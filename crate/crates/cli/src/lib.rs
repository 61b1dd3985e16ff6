//! Command implementations behind the `posegen` binary.

pub mod commands;
pub mod config;

use posegen_core::Error;

/// Process exit status for a failed command: 2 for I/O and unusable
/// inputs, 3 for numeric failure, 4 for configuration mismatches.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Usage(_) => 2,
        Error::Numeric(_) => 3,
        Error::Config(_) | Error::Shape(_) => 4,
        Error::Internal(_) => 1,
    }
}
