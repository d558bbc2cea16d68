use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A price-income point outside the family's box.
    #[error("price-income point {0:?} lies outside the domain")]
    Domain(Vec<f64>),

    #[error("configuration error: {0}")]
    Config(String),

    /// The Neumann right-hand side does not integrate to zero.
    #[error("compatibility error: rhs mean {mean:e} exceeds 1e-3 * max|f| = {bound:e}")]
    Compatibility { mean: f64, bound: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Density floor violated inside the support.
    #[error("family regularity error: {0}")]
    Regularity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integration error: {0}")]
    Integration(String),

    #[error("inconsistency: {0}")]
    Inconsistency(String),

    #[error("parse error (row {row}): {msg}")]
    Parse { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user input rather than numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
