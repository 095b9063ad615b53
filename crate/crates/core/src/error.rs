use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error(
        "kernel failed the monotonicity condition: negative mass {neg_mass:e} >= limit {limit:e} \
         at oversampling ({ng1}, {ng2})"
    )]
    Monotonicity {
        neg_mass: f64,
        limit: f64,
        ng1: usize,
        ng2: usize,
    },

    #[error("horizon mismatch: expected {expected}, found {found}")]
    HorizonMismatch { expected: usize, found: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty sample")]
    EmptySample,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported control file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
