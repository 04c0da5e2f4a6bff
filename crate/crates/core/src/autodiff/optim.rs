//! Adam and rectified Adam over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn radam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Radam, ..Self::adam(lr) }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.ids().map(|id| Matrix::zeros(s.get(id).rows(), s.get(id).cols())).collect();
        Self { cfg, state: OptimizerState { step: 0, m: zeros(store), v: zeros(store) } }
    }

    pub fn with_state(cfg: OptimizerConfig, store: &ParamStore, state: OptimizerState) -> Result<Self> {
        if state.m.len() != store.len() || state.v.len() != store.len() {
            return Err(Error::Shape("optimizer state does not match parameter count".into()));
        }
        for id in store.ids() {
            let shape = store.get(id).shape();
            if state.m[id.index()].shape() != shape || state.v[id.index()].shape() != shape {
                return Err(Error::Shape(format!("optimizer state for {} has wrong shape", store.name(id))));
            }
        }
        Ok(Self { cfg, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Applies one update. Fails without touching anything if a gradient
    /// entry is not finite; the error names the offending parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        let OptimizerConfig { kind, lr, beta1, beta2, eps } = self.cfg;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        // None: plain momentum step without the adaptive denominator.
        let rect = match kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::Radam => {
                let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
                let rho = rho_inf - 2.0 * t as f64 * beta2.powi(t) / bc2;
                (rho > 4.0)
                    .then(|| ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt())
            }
        };
        for (id, g) in store.ids().zip(grads) {
            let i = id.index();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                p[k] -= match rect {
                    Some(r) => lr * r * mhat / ((v[k] / bc2).sqrt() + eps),
                    None => lr * mhat,
                };
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::row_vector(vec![3.0, -2.0]));
        (s, id)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = quadratic_store();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &s);
        opt.step(&mut s, &[Matrix::row_vector(vec![6.0, -4.0])]).unwrap();
        let w = s.get(id).data();
        assert!((w[0] - 2.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn radam_warmup_is_plain_momentum() {
        let (mut s, id) = quadratic_store();
        let mut opt = Optimizer::new(OptimizerConfig::radam(0.1), &s);
        opt.step(&mut s, &[Matrix::row_vector(vec![1.0, 1.0])]).unwrap();
        // rho_1 = 1 <= 4 so the update is lr * m_hat = lr * g
        assert!((s.get(id).data()[0] - 2.9).abs() < 1e-12);
    }

    #[test]
    fn both_minimize_a_quadratic() {
        for cfg in [OptimizerConfig::adam(0.05), OptimizerConfig::radam(0.05)] {
            let (mut s, id) = quadratic_store();
            let mut opt = Optimizer::new(cfg, &s);
            for _ in 0..2000 {
                let g = s.get(id).map(|w| 2.0 * w);
                opt.step(&mut s, &[g]).unwrap();
            }
            assert!(s.get(id).data().iter().all(|w| w.abs() < 1e-2), "{:?}: {:?}", cfg.kind, s.get(id));
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let (mut s, id) = quadratic_store();
        let before = s.get(id).clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &s);
        let err = opt.step(&mut s, &[Matrix::row_vector(vec![f64::NAN, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.get(id), &before);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Matrix::row_vector(vec![3.0]), Matrix::row_vector(vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[1].data()[0] - 0.8).abs() < 1e-12);
        let mut small = vec![Matrix::row_vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.1);
    }
}
