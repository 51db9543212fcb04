//! Adam optimizer.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, params: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        Self {
            config,
            params: params.to_vec(),
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moment estimates, in parameter order.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`Adam::moments`] and [`Adam::steps`].
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<(), String> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(format!("expected {} moment tensors", self.params.len()));
        }
        for ((a, b), c) in m.iter().zip(&v).zip(&self.m) {
            if a.shape() != c.shape() || b.shape() != c.shape() {
                return Err(format!("moment shape {:?} does not match {:?}", a.shape(), c.shape()));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let one = T::one();
        for (i, &id) in self.params.iter().enumerate() {
            let g = grads.get(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to eps).
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new([1, 1, 1, 2], vec![1.0, -2.0]));
        let mut opt = Adam::new(AdamConfig::default(), &s, &[a]);
        let mut g = Graph::new(&[a]);
        let av = g.param(&s, a);
        let l = g.mean(av);
        let grads = g.backward(l);
        opt.step(&mut s, &grads, 0.1);
        let d = s.get(a).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 2.1).abs() < 1e-6, "{d:?}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimizes_quadratic_like_loss() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new([1, 1, 1, 3], vec![3.0, -1.0, 0.5]));
        let mut opt = Adam::new(AdamConfig::default(), &s, &[a]);
        let target = Tensor::new([1, 1, 1, 3], vec![0.2, 0.4, -0.3]);
        for _ in 0..2000 {
            let mut g = Graph::new(&[a]);
            let av = g.param(&s, a);
            let t = g.constant(target.clone());
            let l = g.mean_abs_diff(av, t);
            let grads = g.backward(l);
            opt.step(&mut s, &grads, 0.01);
        }
        for (p, t) in s.get(a).data().iter().zip(target.data()) {
            assert!((p - t).abs() < 0.05, "{p} vs {t}");
        }
    }
}
