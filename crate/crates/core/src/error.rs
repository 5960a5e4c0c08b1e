use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("angle {0}° outside the open interval (-90°, 90°)")]
    AngleOutOfRange(f64),

    #[error("shape mismatch: {what} (expected {expected}, got {actual})")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("noise variance is zero, ratio is infinite")]
    InfiniteRatio,

    #[error("column {0} of the sensing matrix is zero")]
    DegenerateColumn(usize),

    #[error("initialization could not reach orthogonality threshold {threshold} (best metric {best})")]
    InfeasibleStart { best: f64, threshold: f64 },

    #[error("non-finite message at decoder iteration {iteration}")]
    NumericalFailure { iteration: usize },

    #[error("infeasible calibration target: {0}")]
    InfeasibleTarget(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}
