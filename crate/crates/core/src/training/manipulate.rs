use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainError;
use crate::trace::{AlignedTrace, TraceBox};

/// How the cycle pass alters the input traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CycleMode {
    /// Swap traces between batch entries.
    Batch,
    /// Cut each trace into segments and shuffle them.
    Segments,
}

impl std::fmt::Display for CycleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CycleMode::Batch => "cycle_b",
            CycleMode::Segments => "cycle_s",
        })
    }
}

/// A uniformly random cyclic permutation (Sattolo), so no index stays put.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Splits `trace` into `segments` contiguous pieces whose lengths differ by
/// at most one (longer pieces first) and lays them out in the order `perm`.
pub fn split_and_permute(
    trace: &AlignedTrace,
    segments: usize,
    perm: &[usize],
) -> Result<AlignedTrace, TrainError> {
    let n = trace.len();
    if segments == 0 || segments > n {
        return Err(TrainError::Config(format!(
            "cannot cut a trace of length {n} into {segments} segments"
        )));
    }
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..segments).collect::<Vec<_>>() {
        return Err(TrainError::Config(format!(
            "{perm:?} is not a permutation of 0..{segments}"
        )));
    }
    let (base, extra) = (n / segments, n % segments);
    let mut pieces = Vec::with_capacity(segments);
    let mut start = 0;
    for s in 0..segments {
        let len = base + usize::from(s < extra);
        pieces.push(&trace.boxes()[start..start + len]);
        start += len;
    }
    Ok(perm
        .iter()
        .flat_map(|&p| pieces[p].iter().copied())
        .collect())
}

/// Trace manipulation for the cycle pass.
pub fn manipulate_trace<R: Rng>(
    traces: &[AlignedTrace],
    mode: CycleMode,
    segments: usize,
    rng: &mut R,
) -> Result<Vec<AlignedTrace>, TrainError> {
    match mode {
        CycleMode::Batch => {
            if traces.len() < 2 {
                return Err(TrainError::Config(
                    "trace swapping needs a batch of at least 2".into(),
                ));
            }
            let p = derangement(traces.len(), rng);
            Ok(p.iter().map(|&j| traces[j].clone()).collect())
        }
        CycleMode::Segments => traces
            .iter()
            .map(|t| {
                let mut perm: Vec<usize> = (0..segments).collect();
                perm.shuffle(rng);
                split_and_permute(t, segments, &perm)
            })
            .collect(),
    }
}

/// Replaces each box by the whole-image box with probability `p`.
pub fn random_box_replacement<R: Rng>(trace: &[TraceBox], p: f64, rng: &mut R) -> Vec<TraceBox> {
    assert!(
        (0.0..=1.0).contains(&p),
        "replacement probability {p} outside [0, 1]"
    );
    trace
        .iter()
        .map(|&b| {
            if rng.gen_bool(p) {
                TraceBox::WHOLE_IMAGE
            } else {
                b
            }
        })
        .collect()
}

/// Standard Gumbel draw, `-ln(-ln u)`.
pub fn gumbel_noise<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// `softmax((logits + noise) / tau)` for one row; `keep` excludes entries.
pub fn gumbel_softmax(
    logits: &[f64],
    noise: &[f64],
    tau: f64,
    keep: impl Fn(usize) -> bool,
) -> Vec<f64> {
    assert!(tau > 0.0, "temperature must be positive");
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    let max = z
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, v)| if keep(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
