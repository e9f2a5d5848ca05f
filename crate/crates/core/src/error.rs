use std::path::PathBuf;

use thiserror::Error;

use crate::day_ahead::DayAheadSchedule;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("session {id}: {reason}")]
    InvalidSession { id: u64, reason: String },

    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("constraint set is empty at step {step}: {detail}")]
    Infeasible { step: usize, detail: String },

    /// The day-ahead solver hit its iteration cap. Carries the best iterate so
    /// callers can still write artifacts.
    #[error(
        "day-ahead solver stopped after {} iterations (optimality residual {:.3e}, feasibility residual {:.3e})",
        .0.stats.iterations, .0.stats.optimality_residual, .0.stats.feasibility_residual
    )]
    NotConverged(Box<DayAheadSchedule>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}, row {row}: {msg}", path.display())]
    Row {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("config {}: at `{at}`: {msg}", path.display())]
    Config {
        path: PathBuf,
        at: String,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                what,
                expected,
                actual,
            })
        }
    }
}
