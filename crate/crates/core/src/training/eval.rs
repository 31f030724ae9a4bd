//! Validation measures.

use super::TrainError;
use crate::autodiff::Tape;
use crate::data::Example;
use crate::lbm::lbm_score;
use crate::metrics::corpus_bleu;
use crate::model::{
    forward_streams, generate_caption, generate_joint, generate_trace, image_encode,
    teacher_inputs, CaptionInput, Heads, ModelParams, StreamInputs, TaskMode, BOS, END, PAD,
};
use crate::trace::{AlignedTrace, TraceBox};

const CHUNK: usize = 32;

/// Share of caption positions (END included) whose most likely word under
/// teacher forcing, with the trace given, is the reference word.
pub fn caption_accuracy(params: &ModelParams, examples: &[Example]) -> Result<f64, TrainError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in examples.chunks(CHUNK) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let feats: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        let enc = image_encode(&mut tape, &b, &feats)?;
        let samples: Vec<_> = chunk
            .iter()
            .map(|e| teacher_inputs(TaskMode::ControlledCaption, &e.caption, &e.trace))
            .collect();
        let ids: Vec<usize> = samples
            .iter()
            .flat_map(|s| s.caption_in.iter().copied())
            .collect();
        let boxes: Vec<TraceBox> = samples
            .iter()
            .flat_map(|s| s.trace_in.iter().copied())
            .collect();
        let cl: Vec<usize> = samples.iter().map(|s| s.caption_in.len()).collect();
        let tl: Vec<usize> = samples.iter().map(|s| s.trace_in.len()).collect();
        let out = forward_streams(
            &mut tape,
            &b,
            TaskMode::ControlledCaption,
            &enc,
            &StreamInputs {
                caption: CaptionInput::Tokens(&ids),
                caption_lens: &cl,
                trace: &boxes,
                trace_lens: &tl,
                heads: Heads::Caption,
            },
        )?;
        let logits = tape.value(out.logits.expect("caption head"));
        let targets = samples
            .iter()
            .flat_map(|s| s.caption_target.iter().copied());
        for (r, target) in targets.enumerate() {
            let row = logits.row(r);
            let mut best = END;
            for (tok, &v) in row.iter().enumerate() {
                if tok != PAD && tok != BOS && v > row[best] {
                    best = tok;
                }
            }
            hit += usize::from(best == target);
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

fn mean(xs: impl Iterator<Item = Result<f64, TrainError>>) -> Result<f64, TrainError> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Mean LBM between reference traces and traces generated from the
/// reference captions.
pub fn trace_lbm(params: &ModelParams, examples: &[Example], k: usize) -> Result<f64, TrainError> {
    mean(examples.iter().map(|e| {
        let pred = generate_trace(params, &e.features, &e.caption)?;
        Ok(lbm_score(&e.trace, &pred, k)?)
    }))
}

/// Mean LBM of predicting the whole-image box for every word.
pub fn sentinel_lbm(examples: &[Example], k: usize) -> Result<f64, TrainError> {
    mean(examples.iter().map(|e| {
        let pred = AlignedTrace::new(vec![TraceBox::WHOLE_IMAGE; e.trace.len()]);
        Ok(lbm_score(&e.trace, &pred, k)?)
    }))
}

/// Mean LBM of jointly generated traces. A generation that stops at once is
/// scored as a single whole-image box.
pub fn joint_lbm(params: &ModelParams, examples: &[Example], k: usize) -> Result<f64, TrainError> {
    mean(examples.iter().map(|e| {
        let (_, mut pred) = generate_joint(params, &e.features)?;
        if pred.is_empty() {
            pred = AlignedTrace::new(vec![TraceBox::WHOLE_IMAGE]);
        }
        Ok(lbm_score(&e.trace, &pred, k)?)
    }))
}

/// Corpus BLEU-4 of captions generated from the reference traces.
pub fn caption_bleu(
    params: &ModelParams,
    examples: &[Example],
    beam: usize,
) -> Result<f64, TrainError> {
    let words = |ids: &[usize]| ids.iter().map(usize::to_string).collect::<Vec<_>>();
    let mut cands = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for e in examples {
        let c = generate_caption(params, &e.features, &e.trace, beam)?;
        cands.push(words(c.ids()));
        refs.push(vec![words(e.caption.ids())]);
    }
    Ok(corpus_bleu(&cands, &refs, 4))
}
