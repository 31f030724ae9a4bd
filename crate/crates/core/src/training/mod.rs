//! Losses, the cycle pass, trace manipulations and the optimization loop.

mod eval;
mod loss;
mod manipulate;
mod run;

pub use eval::{caption_accuracy, caption_bleu, joint_lbm, sentinel_lbm, trace_lbm};
pub use loss::{cycle_step, loss_total, BatchLoss, LossTerms, LossWeights, TaskSet};
pub use manipulate::{
    derangement, gumbel_noise, gumbel_softmax, manipulate_trace, random_box_replacement,
    split_and_permute, CycleMode,
};
pub use run::{learning_rate, train, EpochLog, TrainReport, ValLog};

use crate::autodiff::AutodiffError;
use crate::lbm::LbmError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Lbm(#[from] LbmError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("step {step}: non-finite loss {terms:?}")]
    NonFinite { step: usize, terms: LossTerms },
}

impl TrainError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Autodiff(AutodiffError::NonFinite { .. })
                | TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
                | TrainError::Lbm(LbmError::Infeasible { .. })
        )
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Probability of replacing a joint-mode input box by the whole image.
    pub replace_p: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Segment count for cycle_s.
    pub segments: usize,
    pub seed: u64,
    pub tasks: TaskSet,
    /// Validate every this many epochs (0 disables periodic validation).
    pub eval_every: usize,
    /// Validation uses at most this many examples.
    pub eval_limit: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            decay: 0.8,
            decay_every: 3,
            batch_size: 30,
            epochs: 30,
            max_steps: None,
            replace_p: 0.5,
            tau: 1.0,
            segments: 3,
            seed: 0,
            tasks: TaskSet::default(),
            eval_every: 1,
            eval_limit: 64,
            beam: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay {} outside (0, 1]", self.decay));
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.epochs == 0 {
            return fail("decay_every, batch_size and epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.replace_p) {
            return fail(format!(
                "replacement probability {} outside [0, 1]",
                self.replace_p
            ));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return fail(format!("temperature {} must be positive", self.tau));
        }
        if self.segments == 0 {
            return fail("segments must be at least 1".into());
        }
        if self.beam == 0 {
            return fail("beam must be at least 1".into());
        }
        Ok(())
    }
}
