//! Dense reverse-mode automatic differentiation.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, sample_coords, Coord};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Axis, Gradients, NodeId, OpKind, Tape, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("masked softmax: row {row} has every position masked")]
    DegenerateAttention { row: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("grad_check: step {0} outside [1e-7, 1e-4]")]
    BadStep(f64),
}
