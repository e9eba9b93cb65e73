//! Library side of the `netsched` command-line tool: configuration parsing,
//! artifact types and subcommand implementations.

pub mod artifact;
pub mod commands;
pub mod config;

pub use config::{ConfigError, ModelConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const NUMERICAL: u8 = 2;
    pub const POSSIBLY_UNSTABLE: u8 = 3;
}

/// Maps an error to its exit code.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    use netsched::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::PossiblyUnstable { .. }) => exit::POSSIBLY_UNSTABLE,
        Some(E::Convergence { .. } | E::Numerical(_) | E::SingularMatrix(_) | E::GridOverflow { .. } | E::Consistency(_)) => {
            exit::NUMERICAL
        }
        _ => exit::CONFIG,
    }
}
