use thiserror::Error;

use crate::world::VehicleId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("addressing error: unknown recipient {0}")]
    Addressing(VehicleId),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invariant violated at step {step}: {message}")]
    Invariant {
        step: u64,
        message: String,
        dump: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
