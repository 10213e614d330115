use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("layer {layer}: capacity {capacity} cannot hold {distinct} distinct experts")]
    InfeasibleCapacity {
        layer: usize,
        distinct: usize,
        capacity: usize,
    },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("pipeline failed at batch {batch}: {source}")]
    Pipeline {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing input file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingFile(_) => 1,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Aggregation(_) => 2,
            Error::Pipeline { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
