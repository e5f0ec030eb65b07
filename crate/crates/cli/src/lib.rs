//! Pipelines behind the `ggpfr` command-line tool.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod reproduce;

use ggpfr::ErrorClass;

/// Process exit code for an error class.
pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Io => 2,
        ErrorClass::Validation => 3,
        ErrorClass::Numerical => 4,
    }
}
