//! The mirrored transformer: an image encoder feeding two structurally
//! identical streams, one over caption tokens and one over trace boxes.

mod checkpoint;
mod config;
mod decode;
mod forward;
mod masks;
mod params;
mod vocab;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use config::{ModelConfig, TaskMode};
pub use decode::{generate_caption, generate_joint, generate_trace, greedy_caption};
pub use forward::{
    forward_streams, image_encode, mitr_forward, teacher_inputs, CaptionInput, Encoded, Heads,
    StreamInputs, StreamOutputs, TeacherSample,
};
pub use masks::{build_masks, AttnMask, MaskSet};
pub use params::{Bound, ModelParams};
pub use vocab::{CaptionTokens, Vocab, BOS, END, FIRST_WORD_ID, PAD, UNK};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
