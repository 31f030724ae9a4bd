use rand::Rng;

use super::manipulate::{gumbel_noise, manipulate_trace, random_box_replacement, CycleMode};
use super::{TrainConfig, TrainError};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::Example;
use crate::model::{
    forward_streams, image_encode, teacher_inputs, Bound, CaptionInput, Encoded, Heads,
    StreamInputs, TaskMode, TeacherSample, BOS, PAD,
};
use crate::trace::{AlignedTrace, TraceBox};

/// Weights of the trace, caption, cycle and joint terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub trace: f64,
    pub caption: f64,
    pub cycle: f64,
    pub joint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            trace: 1.0,
            caption: 0.3,
            cycle: 0.1,
            joint: 1.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        trace: 0.0,
        caption: 0.0,
        cycle: 0.0,
        joint: 0.0,
    };

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("trace", self.trace),
            ("caption", self.caption),
            ("cycle", self.cycle),
            ("joint", self.joint),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::Config(format!(
                    "weight {name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Which loss terms a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSet {
    pub trace: bool,
    pub caption: bool,
    pub joint: bool,
    pub cycle: Option<CycleMode>,
}

impl Default for TaskSet {
    fn default() -> Self {
        Self {
            trace: true,
            caption: true,
            joint: true,
            cycle: None,
        }
    }
}

impl std::str::FromStr for TaskSet {
    type Err = TrainError;

    /// Comma-separated subset of `trace`, `caption`, `joint`, `cycle_b`,
    /// `cycle_s`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut t = TaskSet {
            trace: false,
            caption: false,
            joint: false,
            cycle: None,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let cycle = match part {
                "trace" => {
                    t.trace = true;
                    None
                }
                "caption" => {
                    t.caption = true;
                    None
                }
                "joint" => {
                    t.joint = true;
                    None
                }
                "cycle_b" => Some(CycleMode::Batch),
                "cycle_s" => Some(CycleMode::Segments),
                other => return Err(TrainError::Config(format!("unknown task {other:?}"))),
            };
            if let Some(c) = cycle {
                if t.cycle.is_some_and(|prev| prev != c) {
                    return Err(TrainError::Config(
                        "choose one of cycle_b and cycle_s".into(),
                    ));
                }
                t.cycle = Some(c);
            }
        }
        Ok(t)
    }
}

impl std::fmt::Display for TaskSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        for (on, name) in [
            (self.trace, "trace"),
            (self.caption, "caption"),
            (self.joint, "joint"),
        ] {
            if on {
                parts.push(name.into());
            }
        }
        if let Some(c) = self.cycle {
            parts.push(c.to_string());
        }
        f.write_str(&parts.join(","))
    }
}

/// Unweighted term values; inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub trace: f64,
    pub caption: f64,
    pub cycle: f64,
    pub joint: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: NodeId,
    pub terms: LossTerms,
}

fn boxes_const(tape: &mut Tape, boxes: &[TraceBox]) -> Result<NodeId, TrainError> {
    let data = boxes.iter().flat_map(|b| b.to_array()).collect();
    Ok(tape.constant(Tensor::matrix(boxes.len(), 5, data)?))
}

/// Packed row indices of the first `keep[i]` rows of each segment.
fn leading_rows(lens: &[usize], keep: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut off = 0;
    for (&l, &k) in lens.iter().zip(keep) {
        out.extend(off..off + k);
        off += l;
    }
    out
}

/// Box L1 over the real boxes of each segment (the END position is
/// excluded).
fn box_l1(
    tape: &mut Tape,
    boxes: NodeId,
    lens: &[usize],
    targets: &[&[TraceBox]],
) -> Result<NodeId, TrainError> {
    let keep: Vec<usize> = targets.iter().map(|t| t.len()).collect();
    let pred = tape.embedding(boxes, &leading_rows(lens, &keep))?;
    let flat: Vec<TraceBox> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let target = boxes_const(tape, &flat)?;
    Ok(tape.l1(pred, target)?)
}

/// Teacher-forced caption cross-entropy and box L1 for `task`.
fn teacher_terms(
    tape: &mut Tape,
    b: &Bound,
    task: TaskMode,
    enc: &Encoded,
    samples: &[TeacherSample],
    heads: Heads,
) -> Result<(Option<NodeId>, Option<NodeId>), TrainError> {
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
        tape,
        b,
        task,
        enc,
        &StreamInputs {
            caption: CaptionInput::Tokens(&ids),
            caption_lens: &cl,
            trace: &boxes,
            trace_lens: &tl,
            heads,
        },
    )?;
    let ce = match out.logits {
        Some(l) => {
            let targets: Vec<usize> = samples
                .iter()
                .flat_map(|s| s.caption_target.iter().copied())
                .collect();
            Some(tape.cross_entropy(l, &targets)?)
        }
        None => None,
    };
    let l1 = match out.boxes {
        Some(bx) => {
            let targets: Vec<&[TraceBox]> =
                samples.iter().map(|s| s.trace_target.as_slice()).collect();
            Some(box_l1(tape, bx, &tl, &targets)?)
        }
        None => None,
    };
    Ok((ce, l1))
}

/// Cycle pass: caption the manipulated traces with relaxed sampling, then
/// ground the soft caption again and compare with the manipulated traces.
///
/// Decoding is autoregressive. At every position the next-word distribution
/// is perturbed with Gumbel noise and softened with temperature `tau`; the
/// resulting probability rows are fed back as mixtures of word embeddings,
/// so the whole pass is differentiable.
pub fn cycle_step<R: Rng>(
    tape: &mut Tape,
    b: &Bound,
    enc: &Encoded,
    traces: &[AlignedTrace],
    tau: f64,
    rng: &mut R,
) -> Result<NodeId, TrainError> {
    if tau <= 0.0 {
        return Err(TrainError::Config(format!(
            "temperature {tau} must be positive"
        )));
    }
    let batch = traces.len();
    let vocab = b.params.config().vocab_size;
    // Each caption gets one position per box plus one for END.
    let lens: Vec<usize> = traces.iter().map(|t| t.len() + 1).collect();
    let longest = *lens.iter().max().ok_or(TrainError::EmptyBatch)?;
    let keep_row: Vec<bool> = (0..vocab).map(|t| t != PAD && t != BOS).collect();
    let keep: Vec<bool> = (0..batch).flat_map(|_| keep_row.iter().copied()).collect();

    let cc_trace: Vec<TraceBox> = traces
        .iter()
        .flat_map(|t| {
            t.iter()
                .copied()
                .chain(std::iter::once(TraceBox::WHOLE_IMAGE))
        })
        .collect();
    let mut bos = Tensor::zeros(&[batch, vocab]);
    for s in 0..batch {
        bos.data_mut()[s * vocab + BOS] = 1.0;
    }
    // steps[j] holds the caption input rows at position j, one per sample.
    let mut steps = vec![tape.constant(bos)];
    for t in 0..longest {
        let stacked = tape.concat(&steps, crate::autodiff::Axis::Rows)?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|s| (0..=t).map(move |j| j * batch + s))
            .collect();
        let caption = tape.embedding(stacked, &order)?;
        let out = forward_streams(
            tape,
            b,
            TaskMode::ControlledCaption,
            enc,
            &StreamInputs {
                caption: CaptionInput::Soft(caption),
                caption_lens: &vec![t + 1; batch],
                trace: &cc_trace,
                trace_lens: &lens,
                heads: Heads::Caption,
            },
        )?;
        let last: Vec<usize> = (0..batch).map(|s| s * (t + 1) + t).collect();
        let logits = tape.embedding(out.logits.expect("caption head"), &last)?;
        let noise: Vec<f64> = (0..batch * vocab).map(|_| gumbel_noise(rng)).collect();
        let noise = tape.constant(Tensor::matrix(batch, vocab, noise)?);
        let z = tape.add(logits, noise)?;
        let z = tape.scale(z, 1.0 / tau)?;
        steps.push(tape.masked_softmax(z, Some(&keep))?);
    }

    let stacked = tape.concat(&steps[1..], crate::autodiff::Axis::Rows)?;
    let order: Vec<usize> = lens
        .iter()
        .enumerate()
        .flat_map(|(s, &l)| (0..l).map(move |j| j * batch + s))
        .collect();
    let caption = tape.embedding(stacked, &order)?;
    let ct_trace: Vec<TraceBox> = traces
        .iter()
        .flat_map(|t| std::iter::once(TraceBox::WHOLE_IMAGE).chain(t.iter().copied()))
        .collect();
    let out = forward_streams(
        tape,
        b,
        TaskMode::ControlledTrace,
        enc,
        &StreamInputs {
            caption: CaptionInput::Soft(caption),
            caption_lens: &lens,
            trace: &ct_trace,
            trace_lens: &lens,
            heads: Heads::Trace,
        },
    )?;
    let targets: Vec<&[TraceBox]> = traces.iter().map(|t| t.boxes()).collect();
    box_l1(tape, out.boxes.expect("trace head"), &lens, &targets)
}

fn scalar(tape: &Tape, n: NodeId) -> f64 {
    tape.value(n).item()
}

/// Weighted sum of the active loss terms over one batch. A term is active
/// when its task is enabled and its weight is positive; with no active term
/// the total is a constant 0.
pub fn loss_total<R: Rng>(
    tape: &mut Tape,
    b: &Bound,
    batch: &[&Example],
    weights: &LossWeights,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<BatchLoss, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tasks = &config.tasks;
    let on_trace = tasks.trace && weights.trace > 0.0;
    let on_caption = tasks.caption && weights.caption > 0.0;
    let on_joint = tasks.joint && weights.joint > 0.0;
    let mut on_cycle = tasks.cycle.is_some() && weights.cycle > 0.0;
    if on_cycle && tasks.cycle == Some(CycleMode::Batch) && batch.len() < 2 {
        log::warn!(
            "batch of {} is too small to swap traces; skipping the cycle term",
            batch.len()
        );
        on_cycle = false;
    }
    let mut terms = LossTerms::default();
    let mut weighted: Vec<NodeId> = Vec::new();
    if !(on_trace || on_caption || on_joint || on_cycle) {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(BatchLoss { total: zero, terms });
    }

    let feats: Vec<&Tensor> = batch.iter().map(|e| &e.features).collect();
    let enc = image_encode(tape, b, &feats)?;
    let samples = |task| -> Vec<TeacherSample> {
        batch
            .iter()
            .map(|e| teacher_inputs(task, &e.caption, &e.trace))
            .collect()
    };

    if on_trace {
        let (_, l1) = teacher_terms(
            tape,
            b,
            TaskMode::ControlledTrace,
            &enc,
            &samples(TaskMode::ControlledTrace),
            Heads::Trace,
        )?;
        let l1 = l1.expect("trace head");
        terms.trace = scalar(tape, l1);
        weighted.push(tape.scale(l1, weights.trace)?);
    }
    if on_caption {
        let (ce, _) = teacher_terms(
            tape,
            b,
            TaskMode::ControlledCaption,
            &enc,
            &samples(TaskMode::ControlledCaption),
            Heads::Caption,
        )?;
        let ce = ce.expect("caption head");
        terms.caption = scalar(tape, ce);
        weighted.push(tape.scale(ce, weights.caption)?);
    }
    if on_joint {
        let mut s = samples(TaskMode::Joint);
        for sample in &mut s {
            sample.trace_in = random_box_replacement(&sample.trace_in, config.replace_p, rng);
        }
        let (ce, l1) = teacher_terms(tape, b, TaskMode::Joint, &enc, &s, Heads::Both)?;
        let sum = tape.add(ce.expect("caption head"), l1.expect("trace head"))?;
        terms.joint = scalar(tape, sum);
        weighted.push(tape.scale(sum, weights.joint)?);
    }
    if on_cycle {
        let mode = tasks.cycle.expect("cycle mode");
        let traces: Vec<AlignedTrace> = batch.iter().map(|e| e.trace.clone()).collect();
        let manipulated = match mode {
            CycleMode::Batch => manipulate_trace(&traces, mode, config.segments, rng)?,
            // Short traces are cut into as many pieces as they have boxes.
            CycleMode::Segments => traces
                .iter()
                .map(|t| {
                    let s = config.segments.min(t.len());
                    manipulate_trace(std::slice::from_ref(t), mode, s, rng).map(|mut v| v.remove(0))
                })
                .collect::<Result<_, _>>()?,
        };
        // Swapped traces are captioned over the image they are paired with.
        let l = cycle_step(tape, b, &enc, &manipulated, config.tau, rng)?;
        terms.cycle = scalar(tape, l);
        weighted.push(tape.scale(l, weights.cycle)?);
    }

    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = tape.add(total, w)?;
    }
    terms.total = scalar(tape, total);
    Ok(BatchLoss { total, terms })
}
