//! Error classes and their process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("output directory is locked by another run: {0}")]
    Locked(String),
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DEPENDENCY: u8 = 3;
pub const EXIT_DATA: u8 = 4;

/// Exit code for an error chain: the first classified cause wins,
/// anything else exits with 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Dependency(_) | CliError::Locked(_) => EXIT_DEPENDENCY,
                CliError::Data(_) => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<sepsis_mbrl::Error>() {
            use sepsis_mbrl::Error as E;
            return match e {
                E::Config(_) => EXIT_CONFIG,
                E::Io { .. } => 1,
                _ => EXIT_DATA,
            };
        }
    }
    1
}
