use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for field `{field}` (vocab size {vocab_size})")]
    IndexOutOfRange {
        field: String,
        index: usize,
        vocab_size: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("AUC undefined: dataset contains a single class (logloss {logloss})")]
    SingleClass { logloss: f64 },

    #[error("no descent direction: zero gradient with residual {residual} above tolerance")]
    ZeroGradient { residual: f64 },

    #[error("bisection failed: positive rate {target} is not reachable")]
    InfeasibleRate { target: f64 },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::ZeroGradient { .. }
                | Error::InfeasibleRate { .. }
                | Error::Diverged { .. }
        )
    }

    /// True for malformed or inconsistent input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_)
                | Error::IndexOutOfRange { .. }
                | Error::SingleClass { .. }
                | Error::Format(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
