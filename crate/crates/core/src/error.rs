use thiserror::Error;

/// Errors raised by the library.
///
/// Singular moment matrices are usually *not* errors: estimators and
/// coverage quantities report them as a state (`invertible = false`,
/// coverage `+inf`). The variants below are reserved for violated
/// preconditions and malformed inputs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid feature map: {0}")]
    InvalidFeatures(String),
    #[error("invalid abstraction: {0}")]
    InvalidAbstraction(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} is singular")]
    Singular(&'static str),
    #[error("instance is not realizable (residual {residual:.3e})")]
    NotRealizable { residual: f64 },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed CSV {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
