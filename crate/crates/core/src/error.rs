//! Shared error type for the whole crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The variants map onto the CLI's exit-code policy: everything except
/// [`Error::Numeric`] is a validation/format problem (exit 1); `Numeric`
/// signals a non-finite value mid-computation (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes do not conform for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A non-finite value (NaN/Inf) was produced or supplied.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A vector with (near-)zero norm cannot be L2-normalized.
    #[error("degenerate vector: L2 norm {norm:.3e} is at or below {limit:.3e}")]
    DegenerateVector { norm: f64, limit: f64 },

    /// Invalid box coordinates (min above max, non-finite corner).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed external document (import file, dataset, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// A metric has no defined value on the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Scene generation could not place objects within the retry budget.
    #[error("generation error: {0}")]
    Generation(String),
}

impl Error {
    /// True for aborts caused by non-finite numerics (distinct CLI exit code).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
