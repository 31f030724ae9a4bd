//! Local bipartite matching (LBM) distance between ordered box sequences.
//!
//! Boxes of the shorter trace (length `q`) are matched injectively to boxes
//! of the longer one (length `m`). Row `i` may only use columns `j` with
//! `floor((i−k)·m/q) ≤ j < (i+1+k)·m/q`. The score is the minimum total
//! mean-L1 cost over such matchings, divided by `q`.
//!
//! The constraint matrix of the relaxed LP is a transportation structure and
//! therefore totally unimodular, so the LP optimum is attained by an integral
//! matching. We solve it exactly as a rectangular assignment problem in which
//! out-of-band edges carry a prohibitive cost.

use std::ops::Range;

use crate::trace::{AlignedTrace, TraceBox};

/// Cost given to out-of-band edges before solving.
pub const FORBIDDEN_COST: f64 = 1e9;

/// Largest side length accepted by [`lbm_brute_force`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LbmError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("band needs q ≤ m, got q={q}, m={m}")]
    Unordered { q: usize, m: usize },
    #[error("no band-respecting matching for q={q}, m={m}, k={k}")]
    Infeasible { q: usize, m: usize, k: usize },
    #[error("brute force limited to {BRUTE_FORCE_LIMIT}×{BRUTE_FORCE_LIMIT}, got {q}×{m}")]
    TooLarge { q: usize, m: usize },
}

/// Allowed column interval for every row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandMask {
    pub q: usize,
    pub m: usize,
    pub k: usize,
    rows: Vec<Range<usize>>,
}

impl BandMask {
    pub fn allowed(&self, row: usize) -> Range<usize> {
        self.rows[row].clone()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows[row].contains(&col)
    }
}

/// Band of admissible columns per row. The upper bound is evaluated in
/// integers as `j·q < (i+1+k)·m`.
pub fn band_mask(q: usize, m: usize, k: usize) -> Result<BandMask, LbmError> {
    if q == 0 || m == 0 {
        return Err(LbmError::EmptyTrace);
    }
    if q > m {
        return Err(LbmError::Unordered { q, m });
    }
    let (qi, mi, ki) = (q as i64, m as i64, k as i64);
    let rows = (0..qi)
        .map(|i| {
            let lo = ((i - ki) * mi).div_euclid(qi).max(0);
            // smallest j with j·q ≥ (i+1+k)·m
            let hi = ((i + 1 + ki) * mi + qi - 1).div_euclid(qi).min(mi);
            lo as usize..hi as usize
        })
        .collect();
    Ok(BandMask { q, m, k, rows })
}

/// Dense `q × m` matrix of mean L1 distances over `(x1, y1, x2, y2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub q: usize,
    pub m: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }
}

pub fn box_distance(a: &TraceBox, b: &TraceBox) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 4.0
}

/// Cost matrix with the (shorter) trace `a` on rows.
pub fn cost_matrix(a: &AlignedTrace, b: &AlignedTrace) -> Result<CostMatrix, LbmError> {
    if a.is_empty() || b.is_empty() {
        return Err(LbmError::EmptyTrace);
    }
    let data = a
        .iter()
        .flat_map(|ra| b.iter().map(move |rb| box_distance(ra, rb)))
        .collect();
    Ok(CostMatrix {
        q: a.len(),
        m: b.len(),
        data,
    })
}

/// Minimum-cost assignment of every row to a distinct column of a dense
/// `rows × cols` matrix, `rows ≤ cols`. Shortest augmenting paths with
/// row/column potentials; `O(rows² · cols)`.
pub fn rectangular_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "assignment needs rows ≤ cols");
    assert_eq!(cost.len(), rows * cols);
    let c = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = c(i0, j) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal band-respecting matching: `row → column`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub columns: Vec<usize>,
    pub total_cost: f64,
}

fn ordered<'a>(a: &'a AlignedTrace, b: &'a AlignedTrace) -> (&'a AlignedTrace, &'a AlignedTrace) {
    if a.len() <= b.len() {
        (a, b)
    } else {
        (b, a)
    }
}

/// Solves the band-constrained assignment for `a` (rows) against `b`.
pub fn lbm_assignment(
    a: &AlignedTrace,
    b: &AlignedTrace,
    k: usize,
) -> Result<Assignment, LbmError> {
    let cost = cost_matrix(a, b)?;
    let band = band_mask(cost.q, cost.m, k)?;
    let (q, m) = (cost.q, cost.m);
    let mut masked = cost.data.clone();
    for i in 0..q {
        for j in 0..m {
            if !band.contains(i, j) {
                masked[i * m + j] = FORBIDDEN_COST;
            }
        }
    }
    let columns = rectangular_assignment(&masked, q, m);
    if columns
        .iter()
        .enumerate()
        .any(|(i, &j)| !band.contains(i, j))
    {
        return Err(LbmError::Infeasible { q, m, k });
    }
    let total_cost = columns
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    Ok(Assignment {
        columns,
        total_cost,
    })
}

/// LBM distance (lower is better). Argument order does not matter.
pub fn lbm_score(gt: &AlignedTrace, pred: &AlignedTrace, k: usize) -> Result<f64, LbmError> {
    let (a, b) = ordered(gt, pred);
    let assignment = lbm_assignment(a, b, k)?;
    Ok(assignment.total_cost / a.len() as f64)
}

/// Exhaustive minimum over injective band-respecting matchings.
pub fn lbm_brute_force(gt: &AlignedTrace, pred: &AlignedTrace, k: usize) -> Result<f64, LbmError> {
    let (a, b) = ordered(gt, pred);
    let cost = cost_matrix(a, b)?;
    let (q, m) = (cost.q, cost.m);
    if q > BRUTE_FORCE_LIMIT || m > BRUTE_FORCE_LIMIT {
        return Err(LbmError::TooLarge { q, m });
    }
    let band = band_mask(q, m, k)?;

    fn search(
        row: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
        cost: &CostMatrix,
        band: &BandMask,
    ) {
        if row == cost.q {
            *best = best.min(acc);
            return;
        }
        for j in band.allowed(row) {
            if !used[j] {
                used[j] = true;
                search(row + 1, used, acc + cost.get(row, j), best, cost, band);
                used[j] = false;
            }
        }
    }

    let mut best = f64::INFINITY;
    search(0, &mut vec![false; m], 0.0, &mut best, &cost, &band);
    if best.is_infinite() {
        return Err(LbmError::Infeasible { q, m, k });
    }
    Ok(best / q as f64)
}

/// In-order mean distance for equal-length traces.
pub fn in_order_distance(gt: &AlignedTrace, pred: &AlignedTrace) -> f64 {
    assert_eq!(gt.len(), pred.len());
    gt.iter()
        .zip(pred.iter())
        .map(|(a, b)| box_distance(a, b))
        .sum::<f64>()
        / gt.len() as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> TraceBox {
        TraceBox::from_corners(x1, y1, x2, y2)
    }

    fn random_trace(rng: &mut impl Rng, len: usize) -> AlignedTrace {
        (0..len)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                let (c, d): (f64, f64) = (rng.gen(), rng.gen());
                bx(a.min(b), c.min(d), a.max(b), c.max(d))
            })
            .collect()
    }

    fn sets(mask: &BandMask) -> Vec<Vec<usize>> {
        (0..mask.q).map(|i| mask.allowed(i).collect()).collect()
    }

    #[test]
    fn band_diagonal_for_k0() {
        assert_eq!(
            sets(&band_mask(3, 3, 0).unwrap()),
            vec![vec![0], vec![1], vec![2]]
        );
    }

    #[test]
    fn band_neighbours_for_k1() {
        assert_eq!(
            sets(&band_mask(3, 3, 1).unwrap()),
            vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]
        );
    }

    #[test]
    fn band_rectangular() {
        assert_eq!(
            sets(&band_mask(2, 4, 0).unwrap()),
            vec![vec![0, 1], vec![2, 3]]
        );
    }

    #[test]
    fn band_requires_ordered_lengths() {
        assert_eq!(band_mask(4, 2, 0), Err(LbmError::Unordered { q: 4, m: 2 }));
    }

    #[test]
    fn cost_entries() {
        let a = AlignedTrace::new(vec![bx(0.0, 0.0, 0.2, 0.2), TraceBox::WHOLE_IMAGE]);
        let b = AlignedTrace::new(vec![bx(0.5, 0.5, 0.9, 0.9), TraceBox::WHOLE_IMAGE]);
        let c = cost_matrix(&a, &b).unwrap();
        assert!((c.get(0, 0) - 0.6).abs() < 1e-15);
        assert_eq!(c.get(1, 1), 0.0);
        assert_eq!(
            cost_matrix(&a, &AlignedTrace::default()),
            Err(LbmError::EmptyTrace)
        );
    }

    #[test]
    fn cost_ignores_area_channel() {
        let mut a = bx(0.1, 0.1, 0.3, 0.3);
        let b = a;
        a.area = 0.9;
        assert_eq!(box_distance(&a, &b), 0.0);
    }

    #[test]
    fn swapped_pair_fixture() {
        let a = bx(0.0, 0.0, 0.2, 0.2);
        let b = bx(0.5, 0.5, 0.9, 0.9);
        let gt = AlignedTrace::new(vec![a, b]);
        let pred = AlignedTrace::new(vec![b, a]);
        assert!((lbm_score(&gt, &pred, 0).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(lbm_score(&gt, &pred, 1).unwrap(), 0.0);
        assert!((lbm_brute_force(&gt, &pred, 0).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(lbm_brute_force(&gt, &pred, 1).unwrap(), 0.0);
    }

    #[test]
    fn identical_traces_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_trace(&mut rng, 7);
        for k in 0..3 {
            assert_eq!(lbm_score(&t, &t, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_row_takes_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_trace(&mut rng, 1);
        let b = random_trace(&mut rng, 3);
        let c = cost_matrix(&a, &b).unwrap();
        let expected = c.row(0).iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(lbm_score(&a, &b, 0).unwrap(), expected);
    }

    #[test]
    fn two_by_two_k0_is_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_trace(&mut rng, 2);
        let b = random_trace(&mut rng, 2);
        let d = in_order_distance(&a, &b);
        assert!((lbm_brute_force(&a, &b, 0).unwrap() - d).abs() < 1e-15);
    }

    #[test]
    fn brute_force_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_trace(&mut rng, 9);
        assert_eq!(
            lbm_brute_force(&a, &a, 0),
            Err(LbmError::TooLarge { q: 9, m: 9 })
        );
    }

    #[test]
    fn wide_window_equals_unconstrained_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let q = rng.gen_range(1..=5);
            let m = rng.gen_range(q..=6);
            let a = random_trace(&mut rng, q);
            let b = random_trace(&mut rng, m);
            let c = cost_matrix(&a, &b).unwrap();
            let cols = rectangular_assignment(&c.data, q, m);
            let free = cols
                .iter()
                .enumerate()
                .map(|(i, &j)| c.get(i, j))
                .sum::<f64>()
                / q as f64;
            let brute = lbm_brute_force(&a, &b, m).unwrap();
            assert!((free - brute).abs() <= 1e-9, "{free} vs {brute}");
        }
    }

    proptest! {
        #[test]
        fn band_rows_nonempty_and_feasible(q in 1usize..12, extra in 0usize..12, k in 0usize..4) {
            let m = q + extra;
            let band = band_mask(q, m, k).unwrap();
            for i in 0..q {
                prop_assert!(!band.allowed(i).is_empty());
                prop_assert!(band.allowed(i).end <= m);
            }
            // Hall's condition over contiguous row windows (bands are monotone intervals).
            for s in 0..q {
                for e in s..q {
                    let lo = band.allowed(s).start;
                    let hi = (s..=e).map(|i| band.allowed(i).end).max().unwrap();
                    prop_assert!(hi - lo > e - s);
                }
            }
        }

        #[test]
        fn solver_matches_brute_force(seed in any::<u64>(), q in 1usize..=6, m in 1usize..=6, k in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_trace(&mut rng, q);
            let b = random_trace(&mut rng, m);
            let fast = lbm_score(&a, &b, k).unwrap();
            let slow = lbm_brute_force(&a, &b, k).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-9);
            prop_assert!(fast >= 0.0);
            prop_assert!(lbm_score(&a, &b, k + 1).unwrap() <= fast + 1e-12);
            prop_assert!((lbm_score(&b, &a, k).unwrap() - fast).abs() <= 1e-12);
        }
    }
}
