use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },

    #[error("kernel expression depth {depth} exceeds the grammar cap {max_depth}")]
    DepthExceeded { depth: usize, max_depth: usize },

    #[error("invalid tree path {0:?}")]
    InvalidPath(Vec<crate::kernel::ChildSide>),

    #[error("matrix not positive definite after jitter escalation ({context})")]
    NotPositiveDefinite { context: String },

    #[error("conditional variance {0} is negative beyond roundoff tolerance")]
    NegativeVariance(f64),

    #[error("all particle weights collapsed to -inf")]
    ParticleDegeneracy,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad data: {0}")]
    Data(String),

    #[error("cannot parse kernel expression: {0}")]
    KernelParse(String),

    #[error("empty particle set")]
    EmptyParticleSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
