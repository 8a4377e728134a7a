use super::graph::ParamGrads;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("adam lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Moment accumulators for one group of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        let v = m.clone();
        Ok(Self { config, ids, m, v, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }
}

/// One bias-corrected Adam update of the parameters tracked by `state`.
/// Parameters outside the state are left untouched.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    for &id in &state.ids {
        if grads.get(id).len() != store.get(id).len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: store.get(id).shape().to_vec(),
                rhs: grads.get(id).shape().to_vec(),
            });
        }
        if grads.get(id).data().iter().any(|g| g.is_nan()) {
            return Err(Error::NanGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (k, &id) in state.ids.iter().enumerate() {
        let g = grads.get(id).data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = single(1.25);
        let mut st = AdamState::new(&s, vec![id], AdamConfig::default()).unwrap();
        let g = ParamGrads::zeros_like(&s);
        adam_step(&mut s, &g, &mut st).unwrap();
        adam_step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).item(), 1.25);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // f(x) = x^2 at x0 = 1: g = 2. By hand: m = 0.2, v = 0.004,
        // m_hat = 2, v_hat = 4, step = lr * 2 / (2 + 1e-8).
        let (mut s, id) = single(1.0);
        let mut st = AdamState::new(&s, vec![id], AdamConfig::default()).unwrap();
        let mut g = ParamGrads::zeros_like(&s);
        g.get_mut(id).data_mut()[0] = 2.0;
        adam_step(&mut s, &g, &mut st).unwrap();
        let expected = 1.0 - 5e-4 * 2.0 / (2.0 + 1e-8);
        assert!((s.get(id).item() - expected).abs() < 1e-15);
        assert!((1.0 - s.get(id).item() - 5e-4).abs() < 1e-11);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = single(0.0);
        let mut st = AdamState::new(&s, vec![id], AdamConfig::default()).unwrap();
        let mut g = ParamGrads::zeros_like(&s);
        g.get_mut(id).data_mut()[0] = f64::NAN;
        let err = adam_step(&mut s, &g, &mut st).unwrap_err();
        assert!(matches!(err, Error::NanGradient(ref n) if n == "x"));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let (s, id) = single(0.0);
        let bad = AdamConfig { beta2: 1.0, ..AdamConfig::default() };
        assert!(AdamState::new(&s, vec![id], bad).is_err());
        let bad = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        assert!(AdamState::new(&s, vec![id], bad).is_err());
    }
}
