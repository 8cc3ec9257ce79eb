//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong while building or solving a problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix entries must be 0 or 1, found {value} at ({row},{col})")]
    NotBinary { row: usize, col: usize, value: i64 },

    #[error("ragged rows: row {row} has {found} entries, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("communication topology must be square with a unit diagonal (node {node})")]
    BadTopology { node: usize },

    #[error("information structure block ({k},{j}) is missing")]
    MissingBlock { k: usize, j: usize },

    #[error("information structure key ({k},{j}) lies outside the causal range of horizon {n_steps}")]
    BadBlockKey { k: usize, j: usize, n_steps: usize },

    #[error("matrix violates the required sparsity pattern at ({row},{col}): {value}")]
    PatternViolation { row: usize, col: usize, value: f64 },

    #[error("disturbance polytope is empty")]
    EmptyPolytope,

    #[error("disturbance polytope is unbounded along {direction:?}")]
    UnboundedPolytope { direction: Vec<f64> },

    #[error("vertex enumeration over {rows} rows in dimension {dim} exceeds the budget")]
    VertexBudget { rows: usize, dim: usize },

    #[error("{name}[{index}] must be symmetric positive semidefinite (min eigenvalue {eigmin:.3e})")]
    NotPsd {
        name: &'static str,
        index: usize,
        eigmin: f64,
    },

    #[error("closed-loop map is singular: I - Y*X is not invertible")]
    SingularClosedLoop,

    #[error("QP reported {status}: {detail}")]
    NotConverged { status: String, detail: String },

    #[error("synthesis QP is infeasible")]
    Infeasible,

    #[error("problem file: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by constructors that check shapes.
    pub(crate) fn dims(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }
}
