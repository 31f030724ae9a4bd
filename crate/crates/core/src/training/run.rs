use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{caption_accuracy, caption_bleu, trace_lbm};
use super::loss::{loss_total, LossTerms, LossWeights};
use super::{TrainConfig, TrainError};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape};
use crate::data::Example;
use crate::model::ModelParams;

/// `lr · decay^⌊epoch / decay_every⌋`, epochs counted from 0.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr * config.decay.powi((epoch / config.decay_every) as i32)
}

/// Mean loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_trace")]
    pub l_trace: f64,
    #[serde(rename = "L_caption")]
    pub l_caption: f64,
    #[serde(rename = "L_cycle")]
    pub l_cycle: f64,
    #[serde(rename = "L_joint")]
    pub l_joint: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValLog {
    pub step: usize,
    pub epoch: usize,
    pub caption_accuracy: f64,
    pub lbm_k0: f64,
    pub bleu4: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ModelParams,
    pub epochs: Vec<EpochLog>,
    /// Loss terms of every optimizer step.
    pub steps: Vec<LossTerms>,
    pub validation: Vec<ValLog>,
}

fn validate_on(
    params: &ModelParams,
    val: &[Example],
    config: &TrainConfig,
    step: usize,
    epoch: usize,
) -> Result<ValLog, TrainError> {
    let val = &val[..val.len().min(config.eval_limit)];
    Ok(ValLog {
        step,
        epoch,
        caption_accuracy: caption_accuracy(params, val)?,
        lbm_k0: trace_lbm(params, val, 0)?,
        bleu4: caption_bleu(params, val, config.beam)?,
    })
}

/// Minimizes the weighted loss with Adam. Batches are drawn from a seeded
/// shuffle of `train` every epoch, so equal inputs give bit-identical
/// parameters and logs.
pub fn train(
    train: &[Example],
    val: &[Example],
    mut params: ModelParams,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    weights.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(params.store(), AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        params: params.clone(),
        epochs: Vec::new(),
        steps: Vec::new(),
        validation: Vec::new(),
    };
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut n = 0;
        for idx in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let grads = {
                let b = params.bind(&mut tape);
                let loss = loss_total(&mut tape, &b, &batch, weights, config, &mut rng)?;
                let t = loss.terms;
                if ![t.total, t.trace, t.caption, t.cycle, t.joint]
                    .iter()
                    .all(|v| v.is_finite())
                {
                    return Err(TrainError::NonFinite { step, terms: t });
                }
                report.steps.push(t);
                sum.trace += t.trace;
                sum.caption += t.caption;
                sum.cycle += t.cycle;
                sum.joint += t.joint;
                n += 1;
                tape.backward(loss.total)?.into_params()
            };
            adam_step(params.store_mut(), &grads, &mut adam, lr)?;
            step += 1;
        }
        if n > 0 {
            let m = n as f64;
            let log = EpochLog {
                step,
                epoch,
                l_trace: sum.trace / m,
                l_caption: sum.caption / m,
                l_cycle: sum.cycle / m,
                l_joint: sum.joint / m,
                lr,
            };
            log::info!(
                "epoch {epoch} step {step}: trace {:.4} caption {:.4} cycle {:.4} joint {:.4} lr {lr:.2e}",
                log.l_trace,
                log.l_caption,
                log.l_cycle,
                log.l_joint
            );
            report.epochs.push(log);
        }
        let done = config.max_steps.is_some_and(|m| step >= m) || epoch + 1 == config.epochs;
        if !val.is_empty()
            && config.eval_every > 0
            && ((epoch + 1) % config.eval_every == 0 || done)
        {
            let v = validate_on(&params, val, config, step, epoch)?;
            log::info!(
                "validation at step {step}: accuracy {:.4} lbm {:.4} bleu4 {:.4}",
                v.caption_accuracy,
                v.lbm_k0,
                v.bleu4
            );
            report.validation.push(v);
        }
        if done {
            break 'epochs;
        }
    }
    report.params = params;
    Ok(report)
}
