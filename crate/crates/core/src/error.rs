use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite activation in layer `{layer}`")]
    NumericOverflow { layer: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sample size error: {0}")]
    SampleSize(String),

    #[error("zero variance in both groups")]
    ZeroVariance,

    #[error("degenerate outcome: only one class present")]
    DegenerateOutcome,

    #[error("separation detected: |beta| for `{column}` exceeded {limit} while the likelihood was still improving")]
    Separation { column: String, limit: f64 },

    #[error("collinear design columns: {}", columns.join(", "))]
    Collinearity { columns: Vec<String> },

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("unmatched visits in join: {}", ids.join(", "))]
    Join { ids: Vec<String> },

    #[error("cannot compute a false positive rate without negatives")]
    NoNegatives,

    #[error("leakage: visit {0} is part of the checkpoint's training manifest")]
    Leakage(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    IoBare(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 numeric/convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::NumericOverflow { .. }
            | Error::Numeric(_)
            | Error::TrainingDiverged { .. }
            | Error::Separation { .. }
            | Error::Collinearity { .. }
            | Error::Convergence(_)
            | Error::ZeroVariance
            | Error::DegenerateOutcome
            | Error::NoNegatives => 3,
            Error::Io { .. } | Error::IoBare(_) => 4,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => 4,
            _ => 2,
        }
    }
}
