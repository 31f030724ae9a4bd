//! Inference-time decoding. Each call binds the parameters and encodes the
//! image once, then rewinds the tape after every step.

use std::cmp::Ordering;

use super::forward::{forward_streams, image_encode, CaptionInput, Encoded, Heads, StreamInputs};
use super::vocab::{CaptionTokens, BOS, END, PAD};
use super::{Bound, ModelError, ModelParams, TaskMode};
use crate::autodiff::{Tape, Tensor};
use crate::trace::{AlignedTrace, TraceBox};

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn generable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Highest log-probability generable token; ties go to the lower id.
fn best_token(logp: &[f64]) -> usize {
    let mut best = END;
    for (tok, &lp) in logp.iter().enumerate() {
        if generable(tok) && lp > logp[best] {
            best = tok;
        }
    }
    best
}

fn check_len(params: &ModelParams, n: usize, what: &str) -> Result<(), ModelError> {
    let max = params.config().max_len;
    if n > max {
        return Err(ModelError::Input(format!(
            "{what} of length {n} exceeds max_len {max}"
        )));
    }
    Ok(())
}

struct Session<'a> {
    tape: Tape,
    bound: Bound<'a>,
    enc: Encoded,
    base: usize,
}

impl<'a> Session<'a> {
    fn new(params: &'a ModelParams, x_v: &Tensor) -> Result<Self, ModelError> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let enc = image_encode(&mut tape, &bound, &[x_v])?;
        let base = tape.mark();
        Ok(Self {
            tape,
            bound,
            enc,
            base,
        })
    }

    /// Runs `copies` packed hypotheses and returns the values of the
    /// requested heads.
    fn run(
        &mut self,
        task: TaskMode,
        copies: usize,
        input: StreamInputs,
    ) -> Result<(Option<Tensor>, Option<Tensor>), ModelError> {
        self.tape.rewind(self.base);
        let enc = self.enc.repeat(&mut self.tape, copies)?;
        let out = forward_streams(&mut self.tape, &self.bound, task, &enc, &input)?;
        let logits = out.logits.map(|n| self.tape.value(n).clone());
        let boxes = out.boxes.map(|n| self.tape.value(n).clone());
        Ok((logits, boxes))
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
}

/// Beam search over captions that follow `trace`. Hypotheses that emit END
/// are set aside; the search ends when none remain alive, when the longest
/// reaches `max_len` words, or when no live hypothesis can beat the best
/// finished one. Returns the finished caption with the highest total
/// log-probability.
pub fn generate_caption(
    params: &ModelParams,
    x_v: &Tensor,
    trace: &AlignedTrace,
    beam: usize,
) -> Result<CaptionTokens, ModelError> {
    if trace.is_empty() {
        return Err(ModelError::Input("cannot caption an empty trace".into()));
    }
    if beam == 0 {
        return Err(ModelError::Input("beam width must be at least 1".into()));
    }
    check_len(params, trace.len(), "trace")?;
    let max_words = params.config().max_len;
    let mut trace_in = trace.boxes().to_vec();
    trace_in.push(TraceBox::WHOLE_IMAGE);
    let mut s = Session::new(params, x_v)?;

    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let step = alive[0].tokens.len();
        if step == max_words {
            done.append(&mut alive);
            break;
        }
        let n = alive.len();
        let ids: Vec<usize> = alive
            .iter()
            .flat_map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()))
            .collect();
        let boxes: Vec<TraceBox> = (0..n).flat_map(|_| trace_in.iter().copied()).collect();
        let (logits, _) = s.run(
            TaskMode::ControlledCaption,
            n,
            StreamInputs {
                caption: CaptionInput::Tokens(&ids),
                caption_lens: &vec![step + 1; n],
                trace: &boxes,
                trace_lens: &vec![trace_in.len(); n],
                heads: Heads::Caption,
            },
        )?;
        let logits = logits.expect("caption head requested");

        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let lp = log_softmax(logits.row((h + 1) * (step + 1) - 1));
            for (tok, &l) in lp.iter().enumerate() {
                if generable(tok) {
                    cands.push((hyp.score + l, h, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(score, h, tok) in cands.iter().take(beam) {
            let tokens = alive[h].tokens.clone();
            if tok == END {
                done.push(Hypothesis { tokens, score });
            } else {
                let mut tokens = tokens;
                tokens.push(tok);
                next.push(Hypothesis { tokens, score });
            }
        }
        alive = next;
        let best_done = done
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if !done.is_empty() && best_done >= best_alive {
            break;
        }
    }
    let best = done
        .into_iter()
        .reduce(|a, b| {
            if b.score.total_cmp(&a.score) == Ordering::Greater {
                b
            } else {
                a
            }
        })
        .expect("search always finishes a hypothesis");
    Ok(CaptionTokens(best.tokens))
}

/// Step-by-step argmax decoding of a caption for `trace`.
pub fn greedy_caption(
    params: &ModelParams,
    x_v: &Tensor,
    trace: &AlignedTrace,
) -> Result<CaptionTokens, ModelError> {
    if trace.is_empty() {
        return Err(ModelError::Input("cannot caption an empty trace".into()));
    }
    check_len(params, trace.len(), "trace")?;
    let mut trace_in = trace.boxes().to_vec();
    trace_in.push(TraceBox::WHOLE_IMAGE);
    let mut s = Session::new(params, x_v)?;
    let mut ids = vec![BOS];
    while ids.len() <= params.config().max_len {
        let (logits, _) = s.run(
            TaskMode::ControlledCaption,
            1,
            StreamInputs {
                caption: CaptionInput::Tokens(&ids),
                caption_lens: &[ids.len()],
                trace: &trace_in,
                trace_lens: &[trace_in.len()],
                heads: Heads::Caption,
            },
        )?;
        let logits = logits.expect("caption head requested");
        let tok = best_token(&log_softmax(logits.row(ids.len() - 1)));
        if tok == END {
            break;
        }
        ids.push(tok);
    }
    Ok(CaptionTokens(ids[1..].to_vec()))
}

/// One box per caption word, each step feeding back the boxes predicted so
/// far.
pub fn generate_trace(
    params: &ModelParams,
    x_v: &Tensor,
    caption: &CaptionTokens,
) -> Result<AlignedTrace, ModelError> {
    if caption.is_empty() {
        return Err(ModelError::Input("cannot ground an empty caption".into()));
    }
    check_len(params, caption.len(), "caption")?;
    let ids = caption.with_end();
    let mut s = Session::new(params, x_v)?;
    let mut trace_in = vec![TraceBox::WHOLE_IMAGE];
    for step in 0..caption.len() {
        let (_, boxes) = s.run(
            TaskMode::ControlledTrace,
            1,
            StreamInputs {
                caption: CaptionInput::Tokens(&ids),
                caption_lens: &[ids.len()],
                trace: &trace_in,
                trace_lens: &[trace_in.len()],
                heads: Heads::Trace,
            },
        )?;
        let boxes = boxes.expect("trace head requested");
        let row: [f64; 5] = boxes.row(step).try_into().expect("five channels");
        trace_in.push(TraceBox::from(row));
    }
    Ok(AlignedTrace::new(trace_in[1..].to_vec()))
}

/// Emits one word and one box per step from the image alone, stopping when
/// the word is END or after `max_len` words.
pub fn generate_joint(
    params: &ModelParams,
    x_v: &Tensor,
) -> Result<(CaptionTokens, AlignedTrace), ModelError> {
    let mut s = Session::new(params, x_v)?;
    let mut ids = vec![BOS];
    let mut trace_in = vec![TraceBox::WHOLE_IMAGE];
    while ids.len() <= params.config().max_len {
        let n = ids.len();
        let (logits, boxes) = s.run(
            TaskMode::Joint,
            1,
            StreamInputs {
                caption: CaptionInput::Tokens(&ids),
                caption_lens: &[n],
                trace: &trace_in,
                trace_lens: &[n],
                heads: Heads::Both,
            },
        )?;
        let (logits, boxes) = (logits.expect("caption head"), boxes.expect("trace head"));
        let tok = best_token(&log_softmax(logits.row(n - 1)));
        if tok == END {
            break;
        }
        let row: [f64; 5] = boxes.row(n - 1).try_into().expect("five channels");
        ids.push(tok);
        trace_in.push(TraceBox::from(row));
    }
    Ok((
        CaptionTokens(ids[1..].to_vec()),
        AlignedTrace::new(trace_in[1..].to_vec()),
    ))
}
