//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in `{op}`: left is {}x{}, right is {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// An operation produced (or was given) a NaN or infinite value.
    #[error("non-finite value in `{op}`")]
    NonFinite { op: &'static str },

    /// Differentiation was requested from a non-scalar output.
    #[error("gradient requires a scalar output, got {}x{}", shape.0, shape.1)]
    NonScalarOutput { shape: (usize, usize) },

    /// A latitude or longitude outside its legal range.
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    CoordinateOutOfRange { lat: f64, lon: f64 },

    /// A city registry that violates its invariants.
    #[error("invalid city set: {reason}")]
    InvalidCitySet { reason: String },

    /// A flow record referenced a city id that is not in the registry.
    #[error("unknown city id {id}")]
    UnknownCity { id: usize },

    /// A time-step label that does not parse as `YYYY-MM`.
    #[error("unparseable step label `{label}`")]
    BadStepLabel { label: String },

    /// An operation that needs at least one record/step received none.
    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },

    /// Pearson correlation over a constant variable.
    #[error("correlation undefined: `{variable}` has zero variance")]
    UndefinedCorrelation { variable: &'static str },

    /// Strict mobility comparison with no equidistant third city.
    #[error("empty comparison set for cities {u} and {v}")]
    EmptyComparisonSet { u: usize, v: usize },

    /// A sequence shorter than the operation requires.
    #[error("insufficient history: need {needed} steps, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// A configuration key that is not recognised.
    #[error("unknown config key `{key}`")]
    UnknownConfigKey { key: String },

    /// A configuration value that fails validation.
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    /// A malformed input file.
    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    /// A malformed checkpoint file.
    #[error("bad checkpoint: {reason}")]
    BadCheckpoint { reason: String },

    /// An unknown model variant name.
    #[error("unknown variant `{name}`")]
    UnknownVariant { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
