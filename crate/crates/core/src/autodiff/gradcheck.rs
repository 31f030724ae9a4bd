//! Central finite-difference verification of tape gradients.

use rand::Rng;

use super::{AutodiffError, NodeId, ParamId, ParamStore, Tape};

/// One scalar entry of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

/// Draws `n` coordinates uniformly from the parameters whose name satisfies
/// `filter`, weighting each tensor by its size.
pub fn sample_coords<R: Rng>(
    params: &ParamStore,
    n: usize,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
) -> Vec<Coord> {
    let pool: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, name, _)| filter(name))
        .map(|(id, _, t)| (id, t.numel()))
        .collect();
    let total: usize = pool.iter().map(|p| p.1).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            for &(param, size) in &pool {
                if k < size {
                    return Coord { param, index: k };
                }
                k -= size;
            }
            unreachable!("sample index within total")
        })
        .collect()
}

/// Largest relative disagreement between the tape gradient and a central
/// difference, over `coords`:
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must build the same deterministic scalar from the bound parameters
/// every time it is called.
pub fn grad_check<F, E>(f: F, params: &ParamStore, coords: &[Coord], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, E>,
    E: From<AutodiffError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(AutodiffError::BadStep(eps).into());
    }
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let out = f(&mut tape, &bound)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for c in coords {
        let analytic = grads.params()[&c.param].data()[c.index];
        let orig = params.get(c.param).data()[c.index];
        probe.get_mut(c.param).data_mut()[c.index] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(c.param).data_mut()[c.index] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(c.param).data_mut()[c.index] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" }.into());
        }
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Axis, Tensor};

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        // Keep entries away from relu / l1 kinks.
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn all_coords(store: &ParamStore) -> Vec<Coord> {
        store
            .iter()
            .flat_map(|(param, _, t)| (0..t.numel()).map(move |index| Coord { param, index }))
            .collect()
    }

    /// Each op is wrapped so the loss is a generic weighted sum of its output.
    fn check_op(
        shapes: &[&[usize]],
        seed: u64,
        build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.insert(format!("p{i}"), random_tensor(&mut rng, s));
        }
        let weights_seed = seed ^ 0xabcdef;
        let f = |tape: &mut Tape, p: &[NodeId]| -> Result<NodeId, AutodiffError> {
            let out = build(tape, p)?;
            let v = tape.value(out);
            if v.numel() == 1 {
                return Ok(out);
            }
            let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
            let w = random_tensor(&mut wr, &[v.cols(), 1]);
            let w = tape.constant(w);
            let proj = tape.matmul(out, w)?;
            tape.sum(proj)
        };
        grad_check(f, &store, &all_coords(&store), 1e-6).unwrap()
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..5 {
            let cases: Vec<(&str, f64)> = vec![
                (
                    "matmul",
                    check_op(&[&[3, 4], &[4, 2]], seed, |t, p| t.matmul(p[0], p[1])),
                ),
                (
                    "add",
                    check_op(&[&[2, 3], &[2, 3]], seed, |t, p| t.add(p[0], p[1])),
                ),
                (
                    "add_bias",
                    check_op(&[&[3, 4], &[4]], seed, |t, p| t.add_bias(p[0], p[1])),
                ),
                (
                    "scale",
                    check_op(&[&[2, 3]], seed, |t, p| t.scale(p[0], -1.7)),
                ),
                ("relu", check_op(&[&[3, 3]], seed, |t, p| t.relu(p[0]))),
                (
                    "sigmoid",
                    check_op(&[&[3, 3]], seed, |t, p| t.sigmoid(p[0])),
                ),
                (
                    "masked_softmax",
                    check_op(&[&[3, 4]], seed, |t, p| {
                        let mask = [
                            true, true, false, true, true, false, false, false, false, true, true,
                            true,
                        ];
                        t.masked_softmax(p[0], Some(&mask))
                    }),
                ),
                (
                    "softmax",
                    check_op(&[&[2, 5]], seed, |t, p| t.masked_softmax(p[0], None)),
                ),
                (
                    "layer_norm",
                    check_op(&[&[3, 6], &[6], &[6]], seed, |t, p| {
                        t.layer_norm(p[0], p[1], p[2])
                    }),
                ),
                (
                    "embedding",
                    check_op(&[&[5, 3]], seed, |t, p| t.embedding(p[0], &[4, 0, 4, 2])),
                ),
                (
                    "concat_rows",
                    check_op(&[&[2, 3], &[1, 3]], seed, |t, p| {
                        t.concat(&[p[0], p[1], p[0]], Axis::Rows)
                    }),
                ),
                (
                    "concat_cols",
                    check_op(&[&[2, 3], &[2, 1]], seed, |t, p| {
                        t.concat(&[p[1], p[0]], Axis::Cols)
                    }),
                ),
                (
                    "slice_rows",
                    check_op(&[&[4, 3]], seed, |t, p| t.slice(p[0], Axis::Rows, 1, 2)),
                ),
                (
                    "slice_cols",
                    check_op(&[&[3, 5]], seed, |t, p| t.slice(p[0], Axis::Cols, 2, 3)),
                ),
                (
                    "transpose",
                    check_op(&[&[2, 4]], seed, |t, p| t.transpose(p[0])),
                ),
                ("sum", check_op(&[&[3, 2]], seed, |t, p| t.sum(p[0]))),
                (
                    "cross_entropy",
                    check_op(&[&[3, 5]], seed, |t, p| t.cross_entropy(p[0], &[1, 4, 0])),
                ),
                (
                    "l1",
                    check_op(&[&[3, 5], &[3, 5]], seed, |t, p| t.l1(p[0], p[1])),
                ),
            ];
            for (name, err) in cases {
                assert!(err <= TOL, "{name} (seed {seed}): rel err {err:e}");
            }
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::matrix(1, 3, vec![0.3, -1.2, 2.5]).unwrap());
        let f = |t: &mut Tape, p: &[NodeId]| -> Result<NodeId, AutodiffError> {
            let xt = t.transpose(p[0])?;
            let sq = t.matmul(p[0], xt)?;
            t.scale(sq, 3.0)
        };
        let err = grad_check(f, &store, &all_coords(&store), 1e-5).unwrap();
        assert!(err <= 1e-9, "{err:e}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let f = |t: &mut Tape, _p: &[NodeId]| -> Result<NodeId, AutodiffError> {
            Ok(t.constant(Tensor::scalar(4.0)))
        };
        let err = grad_check(f, &store, &all_coords(&store), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let store = ParamStore::new();
        let f = |t: &mut Tape, _p: &[NodeId]| -> Result<NodeId, AutodiffError> {
            Ok(t.constant(Tensor::scalar(0.0)))
        };
        assert!(matches!(
            grad_check(f, &store, &[], 1e-2),
            Err(AutodiffError::BadStep(_))
        ));
    }

    #[test]
    fn sampled_coords_respect_filter() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::zeros(&[3, 3]));
        let b = store.insert("b.w", Tensor::zeros(&[2]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = sample_coords(&store, 40, &mut rng, |n| n.starts_with('b'));
        assert_eq!(coords.len(), 40);
        assert!(coords.iter().all(|c| c.param == b && c.index < 2));
    }
}
