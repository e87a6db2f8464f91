//! Shared error type. Numerical guards carry enough context to name the
//! offending node or matrix in machine-readable reports.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("composition requires zero constant term in substituted series (got {0})")]
    Composition(f64),

    #[error("singular constant term in series inversion")]
    SingularSeries,

    #[error("degree cap {cap} too low: {what} needs cap >= {needed}")]
    Capacity {
        what: &'static str,
        cap: usize,
        needed: usize,
    },

    #[error("Kahler positivity violated: phi'' = {value:.6e} at t = {t:.6}")]
    KahlerPositivity { t: f64, value: f64 },

    #[error("non-positive volume form dV{which} at node {node}: density = {value:.6e}")]
    NonPositiveVolume { which: u8, node: usize, value: f64 },

    #[error("degenerate Gram matrix ({context})")]
    DegenerateGram { context: String },

    #[error("Bergman endomorphism singular at node {node} (summand {summand}, value {value:.6e})")]
    BasePointLocus {
        node: usize,
        summand: usize,
        value: f64,
    },

    #[error("inadmissible alpha: {constant} = {value:.6e} vanishes")]
    Inadmissible { constant: &'static str, value: f64 },

    #[error("empty section space: twisted degree {degree} < 0 for summand {summand}")]
    EmptySections { summand: usize, degree: i64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable kind tag for JSON error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "Shape",
            Error::Composition(_) => "Composition",
            Error::SingularSeries => "SingularSeries",
            Error::Capacity { .. } => "Capacity",
            Error::KahlerPositivity { .. } => "KahlerPositivity",
            Error::NonPositiveVolume { .. } => "NonPositiveVolume",
            Error::DegenerateGram { .. } => "DegenerateGram",
            Error::BasePointLocus { .. } => "BasePointLocus",
            Error::Inadmissible { .. } => "Inadmissible",
            Error::EmptySections { .. } => "EmptySections",
            Error::Unsupported(_) => "Unsupported",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
        }
    }

    /// True for the runtime numerical guards (CLI exit code 3); false for
    /// validation errors (exit code 2).
    pub fn is_numerical_guard(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveVolume { .. }
                | Error::DegenerateGram { .. }
                | Error::BasePointLocus { .. }
                | Error::KahlerPositivity { .. }
                | Error::SingularSeries
        )
    }
}
