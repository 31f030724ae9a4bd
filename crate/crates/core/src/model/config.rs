use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Depth of the image / caption / trace stacks.
    pub n_layers: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    /// Width of the precomputed region features.
    pub d_visual: usize,
    /// Generation cap, in tokens (and boxes).
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_layers: 1,
            d_ffn: 2048,
            vocab_size: 0,
            d_visual: 2048,
            max_len: 100,
        }
    }
}

impl ModelConfig {
    /// Small profile for CPU-only experiments.
    pub fn desk(vocab_size: usize, d_visual: usize) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            d_ffn: 64,
            vocab_size,
            d_visual,
            max_len: 100,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1".into());
        }
        if self.d_ffn == 0 || self.d_visual == 0 {
            return fail("d_ffn and d_visual must be positive".into());
        }
        if self.vocab_size <= super::vocab::FIRST_WORD_ID {
            return fail(format!(
                "vocab_size {} leaves no room for words",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Rows of the positional table: stream positions `0..=max_len`.
    pub fn positions(&self) -> usize {
        self.max_len + 1
    }
}

/// Which of the three tasks a forward pass performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskMode {
    /// Caption in, trace out.
    ControlledTrace,
    /// Trace in, caption out.
    ControlledCaption,
    /// Image only, caption and trace out together.
    Joint,
}

impl TaskMode {
    pub const ALL: [TaskMode; 3] = [
        TaskMode::ControlledTrace,
        TaskMode::ControlledCaption,
        TaskMode::Joint,
    ];
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::ControlledTrace => "trace",
            TaskMode::ControlledCaption => "caption",
            TaskMode::Joint => "joint",
        })
    }
}

impl FromStr for TaskMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trace" => Ok(TaskMode::ControlledTrace),
            "caption" => Ok(TaskMode::ControlledCaption),
            "joint" => Ok(TaskMode::Joint),
            other => Err(ModelError::Config(format!("unknown task {other:?}"))),
        }
    }
}
