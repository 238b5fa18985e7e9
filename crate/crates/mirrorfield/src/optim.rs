//! Adaptive-moment optimizer with decoupled weight decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, Tensor};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Moment state lives alongside the parameters it tracks and must survive
/// checkpointing, otherwise a resumed run diverges from an uninterrupted one.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step_count: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in params.iter() {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
            v.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        AdamW { cfg, step_count: 0, m, v }
    }

    /// One update of every parameter present in `grads`. Decay is decoupled:
    /// it scales the weight directly instead of entering the moments.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) {
        self.step_count += 1;
        let b1 = T::from_real(self.cfg.beta1);
        let b2 = T::from_real(self.cfg.beta2);
        let one = T::from_real(1.0);
        let eps = T::from_real(self.cfg.eps);
        let corr1 = T::from_real(1.0 - self.cfg.beta1.powi(self.step_count as i32));
        let corr2 = T::from_real(1.0 - self.cfg.beta2.powi(self.step_count as i32));
        let lr_t = T::from_real(lr);
        let decay = T::from_real(lr * self.cfg.weight_decay);

        for (name, grad) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.shape(), grad.shape(), "gradient shape for {name}");
            let m = self.m.get_mut(name).unwrap_or_else(|| panic!("no moment for {name}"));
            let v = self.v.get_mut(name).unwrap_or_else(|| panic!("no moment for {name}"));
            for i in 0..p.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                let w = p.data()[i];
                p.data_mut()[i] = w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let n = v.len();
        p.insert("w", Tensor::from_vec(&[n], v));
        p
    }

    fn grads_of(v: Vec<f64>) -> IndexMap<String, Tensor<f64>> {
        let n = v.len();
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::from_vec(&[n], v));
        g
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut p = single_param(vec![1.0, -2.0]);
        let mut opt = AdamW::new(cfg, &p);
        let lr = 1e-3;
        opt.step(&mut p, &grads_of(vec![0.5, -0.25]), lr);
        for (i, (w0, g)) in [(1.0f64, 0.5f64), (-2.0, -0.25)].into_iter().enumerate() {
            // bias correction makes the first step direction exactly g/|g|
            let m_hat = g;
            let v_hat = g * g;
            let expect = w0 - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * w0;
            assert!((p.get("w").data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let cfg = AdamWConfig::default();
        let mut p = single_param(vec![0.7]);
        let mut opt = AdamW::new(cfg, &p);
        let gs = [0.3, -0.8];
        for g in gs {
            opt.step(&mut p, &grads_of(vec![g]), 2e-3);
        }
        // independent scalar re-derivation
        let (mut w, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (t, g) in gs.into_iter().enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            w = w - 2e-3 * m_hat / (v_hat.sqrt() + cfg.eps) - 2e-3 * cfg.weight_decay * w;
        }
        assert!((p.get("w").data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
        let mut p = single_param(vec![2.0]);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &grads_of(vec![0.0]), 0.1);
        // zero gradient leaves the moments at zero; only decay acts
        assert!((p.get("w").data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = single_param(vec![3.0, -4.0]);
        let target = [1.0, -1.5];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &p);
        for _ in 0..3000 {
            let w = p.get("w").data();
            let g = vec![2.0 * (w[0] - target[0]), 2.0 * (w[1] - target[1])];
            opt.step(&mut p, &grads_of(g), 5e-3);
        }
        let w = p.get("w").data();
        assert!((w[0] - target[0]).abs() < 1e-3 && (w[1] - target[1]).abs() < 1e-3);
    }
}
