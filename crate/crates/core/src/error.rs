//! Error types shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are inconsistent with the operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A vector whose norm falls below the `DELTA_NORM` floor was passed to
    /// an operation that must divide by it.
    #[error("degenerate norm in {context}: norm {norm:.3e} is below the {floor:.0e} floor")]
    DegenerateNorm {
        context: String,
        norm: f64,
        floor: f64,
    },

    /// Degenerate perturbed vector for a specific (anchor, candidate) pair.
    #[error("degenerate perturbed norm at pair ({i}, {j}): norm {norm:.3e} is below the {floor:.0e} floor")]
    DegeneratePair {
        i: usize,
        j: usize,
        norm: f64,
        floor: f64,
    },

    /// `backward` was invoked on a root that is not 1x1.
    #[error("backward root must be a scalar (1x1), got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    /// The discriminant of the trust-region step-size formula is negative,
    /// which signals an infeasible current state.
    #[error("negative step-size discriminant {value:.3e}: current increment violates the radius")]
    NegativeDiscriminant { value: f64 },

    /// A configuration value breaks a documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A serialized matrix or dataset file is malformed.
    #[error("bad file format: {0}")]
    BadFormat(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} in term {term} (max |grad| {max_grad:.3e})")]
    Divergence {
        step: usize,
        term: String,
        max_grad: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
