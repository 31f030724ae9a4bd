//! Forward passes. Several samples can be packed into one pass: their rows
//! are stacked and attention is restricted to block-diagonal segments, so a
//! packed pass computes exactly what the per-sample passes would.

use super::masks::{build_masks, AttnMask, MaskSet};
use super::params::{Attention, Block, Bound, Ffn, Linear, Norm, StreamLayer};
use super::vocab::{CaptionTokens, BOS, END};
use super::{ModelError, TaskMode};
use crate::autodiff::{Axis, NodeId, Tape, Tensor};
use crate::trace::{AlignedTrace, TraceBox};

fn linear(tape: &mut Tape, b: &Bound, l: &Linear, x: NodeId) -> Result<NodeId, ModelError> {
    let y = tape.matmul(x, b.node(l.w))?;
    Ok(tape.add_bias(y, b.node(l.b))?)
}

fn norm(tape: &mut Tape, b: &Bound, n: &Norm, x: NodeId) -> Result<NodeId, ModelError> {
    Ok(tape.layer_norm(x, b.node(n.gamma), b.node(n.beta))?)
}

fn ffn(tape: &mut Tape, b: &Bound, f: &Ffn, x: NodeId) -> Result<NodeId, ModelError> {
    let h = linear(tape, b, &f.up, x)?;
    let h = tape.relu(h)?;
    linear(tape, b, &f.down, h)
}

/// `norm(x + sublayer)`.
fn residual(
    tape: &mut Tape,
    b: &Bound,
    n: &Norm,
    x: NodeId,
    sub: NodeId,
) -> Result<NodeId, ModelError> {
    let s = tape.add(x, sub)?;
    norm(tape, b, n, s)
}

fn attention(
    tape: &mut Tape,
    b: &Bound,
    a: &Attention,
    queries: NodeId,
    keys: NodeId,
    flags: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let heads = b.params.config().n_heads;
    let dh = b.params.config().d_head();
    let q = linear(tape, b, &a.q, queries)?;
    let k = linear(tape, b, &a.k, keys)?;
    let v = linear(tape, b, &a.v, keys)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, Axis::Cols, h * dh, dh)?,
                tape.slice(k, Axis::Cols, h * dh, dh)?,
                tape.slice(v, Axis::Cols, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale)?;
        let p = tape.masked_softmax(s, flags)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat(&outs, Axis::Cols)?
    };
    linear(tape, b, &a.o, joined)
}

/// Keep-flags for stacked segments; `None` when every query sees every key.
fn packed_flags(
    q_lens: &[usize],
    k_lens: &[usize],
    mask: impl Fn(usize, usize) -> AttnMask,
) -> Option<Vec<bool>> {
    let masks: Vec<AttnMask> = q_lens
        .iter()
        .zip(k_lens)
        .map(|(&q, &k)| mask(q, k))
        .collect();
    if masks.len() == 1 && !masks[0].is_causal() {
        return None;
    }
    let total_k: usize = k_lens.iter().sum();
    let mut flags = Vec::with_capacity(q_lens.iter().sum::<usize>() * total_k);
    let mut k_off = 0;
    for (seg, m) in masks.iter().enumerate() {
        for q in 0..m.queries {
            flags.extend(
                (0..total_k).map(|col| {
                    col >= k_off && col < k_off + k_lens[seg] && m.allows(q, col - k_off)
                }),
            );
        }
        k_off += k_lens[seg];
    }
    Some(flags)
}

fn block(
    tape: &mut Tape,
    b: &Bound,
    blk: &Block,
    queries: NodeId,
    keys: NodeId,
    flags: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let a = attention(tape, b, &blk.attn, queries, keys, flags)?;
    let h = residual(tape, b, &blk.norm1, queries, a)?;
    let f = ffn(tape, b, &blk.ffn, h)?;
    residual(tape, b, &blk.norm2, h, f)
}

fn stream_layer(
    tape: &mut Tape,
    b: &Bound,
    layer: &StreamLayer,
    x: NodeId,
    h_v: NodeId,
    self_flags: Option<&[bool]>,
    visual_flags: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let a = attention(tape, b, &layer.self_attn, x, x, self_flags)?;
    let h = residual(tape, b, &layer.norm1, x, a)?;
    let c = attention(tape, b, &layer.cross, h, h_v, visual_flags)?;
    let h = residual(tape, b, &layer.norm2, h, c)?;
    let f = ffn(tape, b, &layer.ffn, h)?;
    residual(tape, b, &layer.norm3, h, f)
}

/// Encoded regions of one or more images, stacked by rows.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h_v: NodeId,
    pub regions: Vec<usize>,
}

impl Encoded {
    /// The same encoding stacked `times` times, for packing several
    /// hypotheses about one image.
    pub fn repeat(&self, tape: &mut Tape, times: usize) -> Result<Encoded, ModelError> {
        if times == 1 {
            return Ok(self.clone());
        }
        let h_v = tape.concat(&vec![self.h_v; times], Axis::Rows)?;
        let regions = (0..times)
            .flat_map(|_| self.regions.iter().copied())
            .collect();
        Ok(Encoded { h_v, regions })
    }
}

/// Encodes the region features of each image. Regions carry no position, so
/// permuting them permutes the output rows the same way.
pub fn image_encode(
    tape: &mut Tape,
    b: &Bound,
    features: &[&Tensor],
) -> Result<Encoded, ModelError> {
    let c = b.params.config();
    if features.is_empty() {
        return Err(ModelError::Input("no images to encode".into()));
    }
    let mut regions = Vec::with_capacity(features.len());
    let mut data = Vec::new();
    for f in features {
        if !f.is_matrix() || f.rows() == 0 || f.cols() != c.d_visual {
            return Err(ModelError::Input(format!(
                "region features must be (regions ≥ 1, {}), got {:?}",
                c.d_visual,
                f.shape()
            )));
        }
        regions.push(f.rows());
        data.extend_from_slice(f.data());
    }
    let x = tape.constant(Tensor::matrix(regions.iter().sum(), c.d_visual, data)?);
    let flags = packed_flags(&regions, &regions, AttnMask::full);
    let mut h = linear(tape, b, &b.params.layout.image_in, x)?;
    for blk in &b.params.layout.image {
        h = block(tape, b, blk, h, h, flags.as_deref())?;
    }
    Ok(Encoded { h_v: h, regions })
}

/// Caption stream input: word ids, or rows of word probabilities (used by
/// the relaxed cycle pass) that are mixed through the embedding table.
#[derive(Clone, Copy, Debug)]
pub enum CaptionInput<'a> {
    Tokens(&'a [usize]),
    Soft(NodeId),
}

/// Which output heads to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Both,
    Caption,
    Trace,
}

/// Packed stream inputs, already shifted for the task. Segment `i` covers
/// `caption_lens[i]` caption rows and `trace_lens[i]` trace rows.
#[derive(Clone, Copy, Debug)]
pub struct StreamInputs<'a> {
    pub caption: CaptionInput<'a>,
    pub caption_lens: &'a [usize],
    pub trace: &'a [TraceBox],
    pub trace_lens: &'a [usize],
    pub heads: Heads,
}

/// Word logits `(Σn_w, vocab)` and sigmoid boxes `(Σn_r, 5)`.
#[derive(Clone, Copy, Debug)]
pub struct StreamOutputs {
    pub logits: Option<NodeId>,
    pub boxes: Option<NodeId>,
}

fn positions(lens: &[usize]) -> Vec<usize> {
    lens.iter().flat_map(|&n| 0..n).collect()
}

fn boxes_tensor(boxes: &[TraceBox]) -> Result<Tensor, ModelError> {
    let data = boxes.iter().flat_map(|b| b.to_array()).collect();
    Ok(Tensor::matrix(boxes.len(), 5, data)?)
}

/// Runs both streams over packed, already shifted inputs.
pub fn forward_streams(
    tape: &mut Tape,
    b: &Bound,
    task: TaskMode,
    enc: &Encoded,
    input: &StreamInputs,
) -> Result<StreamOutputs, ModelError> {
    let cfg = b.params.config();
    let layout = &b.params.layout;
    let segs = enc.regions.len();
    if input.caption_lens.len() != segs || input.trace_lens.len() != segs {
        return Err(ModelError::Input(format!(
            "{segs} images but {} captions and {} traces",
            input.caption_lens.len(),
            input.trace_lens.len()
        )));
    }
    for (&nw, &nr) in input.caption_lens.iter().zip(input.trace_lens) {
        if nw == 0 || nr == 0 || nw > cfg.positions() || nr > cfg.positions() {
            return Err(ModelError::Input(format!(
                "stream lengths {nw}/{nr} outside 1..={}",
                cfg.positions()
            )));
        }
        if task == TaskMode::Joint && nw != nr {
            return Err(ModelError::Input(format!(
                "joint mode needs aligned streams, got {nw} words and {nr} boxes"
            )));
        }
    }
    let total_w: usize = input.caption_lens.iter().sum();
    let total_r: usize = input.trace_lens.iter().sum();
    if input.trace.len() != total_r {
        return Err(ModelError::Input(format!(
            "{} boxes for {total_r} trace rows",
            input.trace.len()
        )));
    }

    let masks = |nw: usize, nr: usize| -> MaskSet { build_masks(task, nw, nr) };
    let (cl, tl) = (input.caption_lens, input.trace_lens);
    let cap_self = packed_flags(cl, cl, |q, _| masks(q, q).caption_self);
    let tr_self = packed_flags(tl, tl, |q, _| masks(q, q).trace_self);
    let cap_vis = packed_flags(cl, &enc.regions, AttnMask::full);
    let tr_vis = packed_flags(tl, &enc.regions, AttnMask::full);

    let embed = b.node(layout.embed);
    let x_w = match input.caption {
        CaptionInput::Tokens(ids) => {
            if ids.len() != total_w {
                return Err(ModelError::Input(format!(
                    "{} tokens for {total_w} caption rows",
                    ids.len()
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(ModelError::Input(format!(
                    "token id {bad} outside vocabulary"
                )));
            }
            tape.embedding(embed, ids)?
        }
        CaptionInput::Soft(probs) => {
            let shape = tape.value(probs).shape();
            if shape != [total_w, cfg.vocab_size] {
                return Err(ModelError::Input(format!("soft caption shape {shape:?}")));
            }
            tape.matmul(probs, embed)?
        }
    };
    // Inputs are scaled by sqrt(d_model) so they are not swamped by the
    // position table.
    let emb_scale = (cfg.d_model as f64).sqrt();
    let x_w = tape.scale(x_w, emb_scale)?;
    let pos = b.node(layout.position);
    let pw = tape.embedding(pos, &positions(cl))?;
    let mut h_w = tape.add(x_w, pw)?;

    let r = tape.constant(boxes_tensor(input.trace)?);
    let x_r = linear(tape, b, &layout.trace_in, r)?;
    let x_r = tape.scale(x_r, emb_scale)?;
    let pr = tape.embedding(pos, &positions(tl))?;
    let mut h_r = tape.add(x_r, pr)?;

    for (lw, lr) in layout.caption.layers.iter().zip(&layout.trace.layers) {
        h_w = stream_layer(
            tape,
            b,
            lw,
            h_w,
            enc.h_v,
            cap_self.as_deref(),
            cap_vis.as_deref(),
        )?;
        h_r = stream_layer(
            tape,
            b,
            lr,
            h_r,
            enc.h_v,
            tr_self.as_deref(),
            tr_vis.as_deref(),
        )?;
    }

    let mut out = StreamOutputs {
        logits: None,
        boxes: None,
    };
    if input.heads != Heads::Trace {
        let flags = packed_flags(cl, tl, |q, k| masks(q, k).caption_fusion);
        let f = block(tape, b, &layout.caption.fuse, h_w, h_r, flags.as_deref())?;
        out.logits = Some(linear(tape, b, &layout.caption.out, f)?);
    }
    if input.heads != Heads::Caption {
        let flags = packed_flags(tl, cl, |q, k| masks(k, q).trace_fusion);
        let f = block(tape, b, &layout.trace.fuse, h_r, h_w, flags.as_deref())?;
        let o = linear(tape, b, &layout.trace.out, f)?;
        out.boxes = Some(tape.sigmoid(o)?);
    }
    Ok(out)
}

/// Teacher-forcing streams and targets for one aligned pair.
///
/// Both streams span `N + 1` positions: the caption closes with END and the
/// trace with the whole-image box. A decoding stream is shifted right by
/// one, starting with BOS (captions) or the whole-image box (traces).
/// Caption targets are all `N + 1` ids; trace targets are the `N` real boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub caption_in: Vec<usize>,
    pub trace_in: Vec<TraceBox>,
    pub caption_target: Vec<usize>,
    pub trace_target: Vec<TraceBox>,
}

pub fn teacher_inputs(
    task: TaskMode,
    caption: &CaptionTokens,
    trace: &AlignedTrace,
) -> TeacherSample {
    let masks = build_masks(task, caption.len() + 1, trace.len() + 1);
    let caption_target = caption.with_end();
    let mut trace_full = trace.boxes().to_vec();
    trace_full.push(TraceBox::WHOLE_IMAGE);
    let caption_in = if masks.shift_caption {
        std::iter::once(BOS)
            .chain(caption.ids().iter().copied())
            .collect()
    } else {
        caption_target.clone()
    };
    let trace_in = if masks.shift_trace {
        std::iter::once(TraceBox::WHOLE_IMAGE)
            .chain(trace.boxes().iter().copied())
            .collect()
    } else {
        trace_full
    };
    debug_assert_eq!(caption_target.last(), Some(&END));
    TeacherSample {
        caption_in,
        trace_in,
        caption_target,
        trace_target: trace.boxes().to_vec(),
    }
}

/// Teacher-forced forward pass for one image.
pub fn mitr_forward(
    tape: &mut Tape,
    b: &Bound,
    task: TaskMode,
    x_v: &Tensor,
    caption: &CaptionTokens,
    trace: &AlignedTrace,
) -> Result<StreamOutputs, ModelError> {
    if task == TaskMode::Joint && caption.len() != trace.len() {
        return Err(ModelError::Input(format!(
            "joint mode needs one box per word, got {} words and {} boxes",
            caption.len(),
            trace.len()
        )));
    }
    let enc = image_encode(tape, b, &[x_v])?;
    let s = teacher_inputs(task, caption, trace);
    forward_streams(
        tape,
        b,
        task,
        &enc,
        &StreamInputs {
            caption: CaptionInput::Tokens(&s.caption_in),
            caption_lens: &[s.caption_in.len()],
            trace: &s.trace_in,
            trace_lens: &[s.trace_in.len()],
            heads: Heads::Both,
        },
    )
}
