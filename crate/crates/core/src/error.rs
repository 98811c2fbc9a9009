use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite weight at step {step}, neuron {neuron}")]
    NonFinite { step: u64, neuron: usize },

    #[error("non-finite particle at time {time}, particle {particle}")]
    NonFiniteParticle { time: f64, particle: usize },

    #[error("non-finite value of probe `{probe}` at t = {t}, replication {replication}")]
    NonFiniteValue { probe: String, t: f64, replication: u64 },

    #[error("probe `{0}` is not supported here: {1}")]
    Probe(String, &'static str),

    #[error("grid error: {0}")]
    Grid(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension { expected, got })
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension { .. }
            | Error::Probe(..)
            | Error::Grid(_)
            | Error::Unsupported(_) => 2,
            Error::NonFinite { .. } | Error::NonFiniteParticle { .. } | Error::NonFiniteValue { .. } => 3,
            Error::Io { .. } | Error::Csv { .. } => 4,
        }
    }
}
