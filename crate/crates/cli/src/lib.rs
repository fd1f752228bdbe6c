//! Experiment driver: phantom generation, training of the three method
//! variants, SS/RS evaluation, direction-count ablation and reporting.

pub mod commands;
pub mod config;
pub mod report;

use robnoddi_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::PolicyMismatch(_) | Error::SelectionSize { .. } => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}
