use std::collections::BTreeMap;

use super::{AutodiffError, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for every parameter of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.second[id.index()]
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are
/// treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<ParamId, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), AutodiffError> {
    if state.first.len() != params.len() {
        return Err(AutodiffError::Shape {
            op: "adam_step",
            detail: format!(
                "state for {} params, store has {}",
                state.first.len(),
                params.len()
            ),
        });
    }
    for (id, g) in grads {
        let p = params.get(*id);
        if p.shape() != g.shape() || state.first[id.index()].shape() != p.shape() {
            return Err(AutodiffError::Shape {
                op: "adam_step",
                detail: format!(
                    "{}: param {:?}, grad {:?}",
                    params.name(*id),
                    p.shape(),
                    g.shape()
                ),
            });
        }
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (id, g) in grads {
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        let p = params.get_mut(*id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(values.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let grads = BTreeMap::from([(id, Tensor::zeros(&[2]))]);
        adam_step(&mut s, &grads, &mut st, 1e-3).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert!(st.first_moment(id).data().iter().all(|&v| v == 0.0));
        assert!(st.second_moment(id).data().iter().all(|&v| v == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m1 = 0.1 g, v1 = 0.001 g², so m̂ = g and v̂ = g²:
        // Δ = -lr · g / (|g| + ε).
        let (mut s, id) = store_with(&[0.5, 0.5, 0.5]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let g = [0.2, -3.0, 1e-9];
        let grads = BTreeMap::from([(id, Tensor::vector(g.to_vec()).unwrap())]);
        let lr = 0.01;
        adam_step(&mut s, &grads, &mut st, lr).unwrap();
        let expected = [
            0.5 - 0.01 * 0.2 / (0.2 + 1e-8),
            0.5 + 0.01 * 3.0 / (3.0 + 1e-8),
            0.5 - 0.01 * 1e-9 / (1e-9 + 1e-8),
        ];
        for (a, b) in s.get(id).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut s, id) = store_with(&[0.25]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let grads = BTreeMap::from([(id, Tensor::vector(vec![4.0]).unwrap())]);
        adam_step(&mut s, &grads, &mut st, 0.0).unwrap();
        assert_eq!(s.get(id).data(), &[0.25]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, id) = store_with(&[0.25, 1.0]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let grads = BTreeMap::from([(id, Tensor::vector(vec![4.0]).unwrap())]);
        assert!(adam_step(&mut s, &grads, &mut st, 0.1).is_err());
        assert_eq!(st.step, 0);
    }
}
