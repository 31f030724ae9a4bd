//! Word-aligned box encoding of mouse traces.
//!
//! A trace is split into one segment per caption word using the word
//! timings, and each segment becomes the axis-aligned bounding box of its
//! points. Words whose segment is empty get the whole-image box.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TraceError {
    #[error("trace point {index} at t={t} precedes the previous point")]
    UnsortedPoints { index: usize, t: f64 },
    #[error("trace point {index} out of range: ({x}, {y}, t={t})")]
    PointOutOfRange {
        index: usize,
        x: f64,
        y: f64,
        t: f64,
    },
    #[error("word timing {index} ({token:?}) is invalid: [{start}, {end})")]
    BadTiming {
        index: usize,
        token: String,
        start: f64,
        end: f64,
    },
    #[error("word timing {index} overlaps or precedes the previous word")]
    OverlappingTimings { index: usize },
    #[error("cannot box an empty point group")]
    EmptyGroup,
    #[error("no word timings")]
    NoTimings,
    #[error("box {0:?} violates 0 ≤ x1 ≤ x2 ≤ 1, 0 ≤ y1 ≤ y2 ≤ 1")]
    BadBox([f64; 5]),
}

/// Normalized mouse position at time `t` (seconds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl TracePoint {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordTiming {
    pub token: String,
    pub t_start: f64,
    pub t_end: f64,
}

impl WordTiming {
    pub fn new(token: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        Self {
            token: token.into(),
            t_start,
            t_end,
        }
    }

    /// Half-open membership: `t_start ≤ t < t_end`.
    pub fn contains(&self, t: f64) -> bool {
        self.t_start <= t && t < self.t_end
    }
}

/// `[x1, y1, x2, y2, area]` in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct TraceBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub area: f64,
}

impl TraceBox {
    /// The whole image, `[0, 0, 1, 1, 1]`.
    pub const WHOLE_IMAGE: TraceBox = TraceBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
        area: 1.0,
    };

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            area: (x2 - x1) * (y2 - y1),
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.area]
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_whole_image(&self) -> bool {
        *self == Self::WHOLE_IMAGE
    }

    /// Checks the coordinate ordering and range. The area channel is only
    /// checked for non-sentinel boxes.
    pub fn validate(&self) -> Result<(), TraceError> {
        let ok = (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y1)
            && self.x1 <= self.x2
            && self.y1 <= self.y2
            && self.x2 <= 1.0
            && self.y2 <= 1.0;
        let area_ok = self.is_whole_image()
            || (self.area - (self.x2 - self.x1) * (self.y2 - self.y1)).abs() <= 1e-12;
        if ok && area_ok {
            Ok(())
        } else {
            Err(TraceError::BadBox(self.to_array()))
        }
    }
}

impl From<[f64; 5]> for TraceBox {
    fn from(a: [f64; 5]) -> Self {
        Self {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
            area: a[4],
        }
    }
}

impl From<TraceBox> for [f64; 5] {
    fn from(b: TraceBox) -> Self {
        b.to_array()
    }
}

/// One box per caption token, in caption order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlignedTrace(pub Vec<TraceBox>);

impl AlignedTrace {
    pub fn new(boxes: Vec<TraceBox>) -> Self {
        Self(boxes)
    }

    pub fn boxes(&self) -> &[TraceBox] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceBox> {
        self.0.iter()
    }
}

impl FromIterator<TraceBox> for AlignedTrace {
    fn from_iter<I: IntoIterator<Item = TraceBox>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn validate_points(points: &[TracePoint]) -> Result<(), TraceError> {
    for (index, p) in points.iter().enumerate() {
        let in_range = (0.0..=1.0).contains(&p.x)
            && (0.0..=1.0).contains(&p.y)
            && p.t >= 0.0
            && p.t.is_finite();
        if !in_range {
            return Err(TraceError::PointOutOfRange {
                index,
                x: p.x,
                y: p.y,
                t: p.t,
            });
        }
        if index > 0 && p.t < points[index - 1].t {
            return Err(TraceError::UnsortedPoints { index, t: p.t });
        }
    }
    Ok(())
}

pub fn validate_timings(timings: &[WordTiming]) -> Result<(), TraceError> {
    for (index, w) in timings.iter().enumerate() {
        if !(w.t_start.is_finite()
            && w.t_end.is_finite()
            && w.t_start >= 0.0
            && w.t_start <= w.t_end)
        {
            return Err(TraceError::BadTiming {
                index,
                token: w.token.clone(),
                start: w.t_start,
                end: w.t_end,
            });
        }
        if index > 0 && w.t_start < timings[index - 1].t_end {
            return Err(TraceError::OverlappingTimings { index });
        }
    }
    Ok(())
}

/// Groups points by the word whose `[t_start, t_end)` interval contains
/// their timestamp. Points outside every interval are dropped.
pub fn segment_trace(
    points: &[TracePoint],
    timings: &[WordTiming],
) -> Result<Vec<Vec<TracePoint>>, TraceError> {
    validate_points(points)?;
    validate_timings(timings)?;
    let mut groups = vec![Vec::new(); timings.len()];
    let mut cursor = 0;
    for (word, group) in timings.iter().zip(groups.iter_mut()) {
        while cursor < points.len() && points[cursor].t < word.t_start {
            cursor += 1;
        }
        while cursor < points.len() && word.contains(points[cursor].t) {
            group.push(points[cursor]);
            cursor += 1;
        }
    }
    Ok(groups)
}

/// Axis-aligned bounding box of a point group. This equals the bounding box
/// of the group's convex hull, since the hull keeps the extreme coordinates.
pub fn box_from_points(points: &[TracePoint]) -> Result<TraceBox, TraceError> {
    let first = points.first().ok_or(TraceError::EmptyGroup)?;
    let (mut x1, mut y1, mut x2, mut y2) = (first.x, first.y, first.x, first.y);
    for p in &points[1..] {
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    Ok(TraceBox::from_corners(x1, y1, x2, y2))
}

pub fn encode_trace(
    points: &[TracePoint],
    timings: &[WordTiming],
) -> Result<AlignedTrace, TraceError> {
    if timings.is_empty() {
        return Err(TraceError::NoTimings);
    }
    let groups = segment_trace(points, timings)?;
    groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                Ok(TraceBox::WHOLE_IMAGE)
            } else {
                box_from_points(g)
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(AlignedTrace)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pt(x: f64, y: f64, t: f64) -> TracePoint {
        TracePoint::new(x, y, t)
    }

    /// Andrew's monotone chain; test-only oracle.
    fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let mut p = points.to_vec();
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p.dedup();
        if p.len() < 3 {
            return p;
        }
        let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
            (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
        };
        let half = |iter: &mut dyn Iterator<Item = (f64, f64)>| {
            let mut chain: Vec<(f64, f64)> = Vec::new();
            for q in iter {
                while chain.len() >= 2
                    && cross(chain[chain.len() - 2], chain[chain.len() - 1], q) <= 0.0
                {
                    chain.pop();
                }
                chain.push(q);
            }
            chain.pop();
            chain
        };
        let mut hull = half(&mut p.iter().copied());
        hull.extend(half(&mut p.iter().rev().copied()));
        hull
    }

    #[test]
    fn segment_interval_membership() {
        let pts = [pt(0.1, 0.1, 0.1), pt(0.2, 0.2, 0.5)];
        let words = [
            WordTiming::new("a", 0.0, 0.3),
            WordTiming::new("b", 0.3, 1.0),
        ];
        let g = segment_trace(&pts, &words).unwrap();
        assert_eq!(g, vec![vec![pts[0]], vec![pts[1]]]);
    }

    #[test]
    fn empty_interval_gives_empty_group() {
        let pts = [pt(0.1, 0.1, 0.1)];
        let words = [
            WordTiming::new("a", 0.0, 0.3),
            WordTiming::new("b", 0.3, 1.0),
        ];
        let g = segment_trace(&pts, &words).unwrap();
        assert!(g[1].is_empty());
    }

    #[test]
    fn boundary_point_goes_to_later_word() {
        let pts = [pt(0.5, 0.5, 0.3)];
        let words = [
            WordTiming::new("a", 0.0, 0.3),
            WordTiming::new("b", 0.3, 1.0),
        ];
        let g = segment_trace(&pts, &words).unwrap();
        assert!(g[0].is_empty());
        assert_eq!(g[1], vec![pts[0]]);
    }

    #[test]
    fn unsorted_points_rejected() {
        let pts = [pt(0.1, 0.1, 0.5), pt(0.1, 0.1, 0.2)];
        let words = [WordTiming::new("a", 0.0, 1.0)];
        assert_eq!(
            segment_trace(&pts, &words),
            Err(TraceError::UnsortedPoints { index: 1, t: 0.2 })
        );
    }

    #[test]
    fn overlapping_timings_rejected() {
        let words = [
            WordTiming::new("a", 0.0, 0.5),
            WordTiming::new("b", 0.4, 1.0),
        ];
        assert_eq!(
            segment_trace(&[], &words),
            Err(TraceError::OverlappingTimings { index: 1 })
        );
    }

    #[test]
    fn box_of_two_points() {
        let b = box_from_points(&[pt(0.1, 0.2, 0.0), pt(0.3, 0.5, 0.1)]).unwrap();
        assert_eq!(b.coords(), [0.1, 0.2, 0.3, 0.5]);
        assert!((b.area - 0.06).abs() < 1e-15);
    }

    #[test]
    fn single_point_is_degenerate_box() {
        let b = box_from_points(&[pt(0.4, 0.4, 0.0)]).unwrap();
        assert_eq!(b.to_array(), [0.4, 0.4, 0.4, 0.4, 0.0]);
    }

    #[test]
    fn empty_group_is_an_error() {
        assert_eq!(box_from_points(&[]), Err(TraceError::EmptyGroup));
    }

    #[test]
    fn encode_two_words() {
        let pts = [pt(0.1, 0.1, 0.1), pt(0.2, 0.3, 0.2), pt(0.6, 0.6, 0.5)];
        let words = [
            WordTiming::new("a", 0.0, 0.3),
            WordTiming::new("b", 0.3, 1.0),
        ];
        let tr = encode_trace(&pts, &words).unwrap();
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.boxes()[0].coords(), [0.1, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn word_without_points_gets_whole_image() {
        let pts = [pt(0.1, 0.1, 0.1)];
        let words = [
            WordTiming::new("a", 0.0, 0.3),
            WordTiming::new("b", 0.3, 1.0),
            WordTiming::new("c", 1.0, 1.2),
        ];
        let tr = encode_trace(&pts, &words).unwrap();
        assert!(!tr.boxes()[0].is_whole_image());
        assert!(tr.boxes()[1].is_whole_image());
        assert!(tr.boxes()[2].is_whole_image());
    }

    #[test]
    fn no_timings_is_an_error() {
        assert_eq!(encode_trace(&[], &[]), Err(TraceError::NoTimings));
    }

    #[test]
    fn fixture_matches_direct_interval_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut times: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..5.0)).collect();
        times.sort_by(f64::total_cmp);
        let pts: Vec<TracePoint> = times
            .iter()
            .map(|&t| pt(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), t))
            .collect();
        let words: Vec<WordTiming> = (0..5)
            .map(|i| WordTiming::new(format!("w{i}"), i as f64, i as f64 + 1.0))
            .collect();
        let tr = encode_trace(&pts, &words).unwrap();

        // Independent reference: for each interval, scan every point.
        for (w, b) in words.iter().zip(tr.boxes()) {
            let inside: Vec<&TracePoint> = pts
                .iter()
                .filter(|p| p.t >= w.t_start && p.t < w.t_end)
                .collect();
            if inside.is_empty() {
                assert!(b.is_whole_image());
                continue;
            }
            let xs = inside.iter().map(|p| p.x);
            let ys = inside.iter().map(|p| p.y);
            let expect = [
                xs.clone().fold(f64::INFINITY, f64::min),
                ys.clone().fold(f64::INFINITY, f64::min),
                xs.fold(f64::NEG_INFINITY, f64::max),
                ys.fold(f64::NEG_INFINITY, f64::max),
            ];
            assert_eq!(b.coords(), expect);
            b.validate().unwrap();
        }
    }

    proptest! {
        #[test]
        fn bbox_of_hull_equals_bbox(raw in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
            let pts: Vec<TracePoint> = raw.iter().map(|&(x, y)| pt(x, y, 0.0)).collect();
            let hull: Vec<TracePoint> = convex_hull(&raw).into_iter().map(|(x, y)| pt(x, y, 0.0)).collect();
            prop_assert_eq!(box_from_points(&pts).unwrap(), box_from_points(&hull).unwrap());
        }

        #[test]
        fn encoded_length_matches_words(
            n_words in 1usize..8,
            raw in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..8.0), 0..40),
        ) {
            let mut raw = raw;
            raw.sort_by(|a, b| a.2.total_cmp(&b.2));
            let pts: Vec<TracePoint> = raw.iter().map(|&(x, y, t)| pt(x, y, t)).collect();
            let words: Vec<WordTiming> = (0..n_words)
                .map(|i| WordTiming::new("w", i as f64, i as f64 + 0.9))
                .collect();
            let tr = encode_trace(&pts, &words).unwrap();
            prop_assert_eq!(tr.len(), n_words);
            for b in tr.iter() {
                prop_assert!(b.validate().is_ok());
            }
        }
    }
}
