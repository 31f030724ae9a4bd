use super::TaskMode;

/// Query × key attention pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    causal: bool,
}

impl AttnMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            causal: false,
        }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            causal: true,
        }
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        !self.causal || key <= query
    }

    /// Row-major keep-flags for the softmax, or `None` when nothing is hidden.
    pub fn to_flags(&self) -> Option<Vec<bool>> {
        if !self.causal || self.queries == 0 {
            return None;
        }
        let mut flags = Vec::with_capacity(self.queries * self.keys);
        for q in 0..self.queries {
            flags.extend((0..self.keys).map(|k| k <= q));
        }
        Some(flags)
    }
}

/// Every mask and shift a task needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub caption_self: AttnMask,
    pub trace_self: AttnMask,
    /// Caption queries over trace keys.
    pub caption_fusion: AttnMask,
    /// Trace queries over caption keys.
    pub trace_fusion: AttnMask,
    pub shift_caption: bool,
    pub shift_trace: bool,
}

/// The decoding side is shifted right and causally masked; the encoding
/// side sees everything. In joint mode both streams decode, and the fusion
/// attention is causal too.
pub fn build_masks(task: TaskMode, n_w: usize, n_r: usize) -> MaskSet {
    let (caption_decodes, trace_decodes) = match task {
        TaskMode::ControlledCaption => (true, false),
        TaskMode::ControlledTrace => (false, true),
        TaskMode::Joint => (true, true),
    };
    let pick = |causal: bool, q: usize, k: usize| {
        if causal {
            AttnMask::causal(q, k)
        } else {
            AttnMask::full(q, k)
        }
    };
    let fusion_causal = task == TaskMode::Joint;
    MaskSet {
        caption_self: pick(caption_decodes, n_w, n_w),
        trace_self: pick(trace_decodes, n_r, n_r),
        caption_fusion: pick(fusion_causal, n_w, n_r),
        trace_fusion: pick(fusion_causal, n_r, n_w),
        shift_caption: caption_decodes,
        shift_trace: trace_decodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: &AttnMask) -> Vec<Vec<bool>> {
        (0..m.queries)
            .map(|q| (0..m.keys).map(|k| m.allows(q, k)).collect())
            .collect()
    }

    #[test]
    fn controlled_caption_masks() {
        let m = build_masks(TaskMode::ControlledCaption, 3, 3);
        assert_eq!(
            dense(&m.caption_self),
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
        assert!(dense(&m.trace_self).iter().flatten().all(|&b| b));
        assert!(dense(&m.caption_fusion).iter().flatten().all(|&b| b));
        assert!(dense(&m.trace_fusion).iter().flatten().all(|&b| b));
        assert!(m.shift_caption && !m.shift_trace);
    }

    #[test]
    fn joint_masks_are_all_causal() {
        let m = build_masks(TaskMode::Joint, 2, 2);
        for a in [
            &m.caption_self,
            &m.trace_self,
            &m.caption_fusion,
            &m.trace_fusion,
        ] {
            assert_eq!(dense(a), vec![vec![true, false], vec![true, true]]);
        }
        assert!(m.shift_caption && m.shift_trace);
    }

    #[test]
    fn controlled_trace_mirrors_controlled_caption() {
        for (nw, nr) in [(3, 3), (2, 5), (4, 1)] {
            let c = build_masks(TaskMode::ControlledCaption, nw, nr);
            let t = build_masks(TaskMode::ControlledTrace, nr, nw);
            assert_eq!(c.caption_self, t.trace_self);
            assert_eq!(c.trace_self, t.caption_self);
            assert_eq!(c.caption_fusion, t.trace_fusion);
            assert_eq!(c.trace_fusion, t.caption_fusion);
            assert_eq!(
                (c.shift_caption, c.shift_trace),
                (t.shift_trace, t.shift_caption)
            );
        }
    }

    #[test]
    fn full_mask_has_no_flags() {
        assert_eq!(AttnMask::full(2, 3).to_flags(), None);
        assert_eq!(
            AttnMask::causal(2, 3).to_flags(),
            Some(vec![true, false, false, true, true, false])
        );
    }
}
