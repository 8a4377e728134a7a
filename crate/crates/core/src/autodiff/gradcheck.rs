//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// How many entries of each parameter tensor to probe. `None` probes all.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_entries_per_tensor: None }
    }
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over the probed
/// entries of `params`.
///
/// `loss` must build a fresh tape from the store and return its scalar
/// root; it is called once for the analytic gradient and twice per probed
/// entry.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], opts: GradCheckOptions, mut loss: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {}", opts.eps)));
    }
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    if !g.scalar(root).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let analytic = g.backward(root)?.param_table(store);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let r = loss(&mut g, store)?;
        let v = g.scalar(r);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).len();
        for i in probe_indices(n, opts.max_entries_per_tensor) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic.get(id).data()[i];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Evenly spread entry indices, always including the first and last.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n && k > 0 => {
            if k == 1 {
                return vec![0];
            }
            (0..k).map(|j| j * (n - 1) / (k - 1)).collect()
        }
        _ => (0..n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn quadratic_bowl_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![0.3, -1.7, 2.2]));
        let err = grad_check(&mut store, &[w], GradCheckOptions::default(), |g, s| {
            let x = g.param(s, w);
            Ok(g.squared_norm(x))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![0.5, -0.5, 1.5, -2.0]));
        let err = grad_check(&mut store, &[w], GradCheckOptions::default(), |g, s| {
            let x = g.param(s, w);
            let r = g.relu(x);
            let t = g.tanh(r);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0));
        let res = grad_check(&mut store, &[w], GradCheckOptions::default(), |g, s| {
            let x = g.param(s, w);
            g.log(x)
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn probe_indices_spread() {
        assert_eq!(probe_indices(10, Some(3)), vec![0, 4, 9]);
        assert_eq!(probe_indices(2, Some(5)), vec![0, 1]);
    }
}
