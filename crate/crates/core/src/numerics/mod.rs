//! Dense matrices, a reverse-mode tape, finite-difference checking and
//! parameter persistence.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_GRAD_CHECK_EPS};
pub use matrix::Matrix;
pub use params::{read_params, write_params, ParamId, ParamStore, PARAM_MAGIC};
pub use tape::{Gradients, Tape, Var};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", .left.0, .left.1, .right.0, .right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}x{cols} matrix needs {} values, got {len}", rows * cols)]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("rows have different lengths")]
    Ragged,
    #[error("{op}: non-finite value at ({row}, {col})")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },
    #[error("non-finite loss while perturbing parameter {param_index}")]
    NonFiniteLoss { param_index: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::ShapeMismatch { op, left, right }
    }

    /// True for overflow or NaN rather than a caller mistake.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite { .. } | Self::NonFiniteLoss { .. })
    }
}
