//! AdamW with a linear warmup / linear decay learning-rate schedule.

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning rate at 0-based `step` of `total`: ramps up over the first
/// `ceil(warmup * total)` steps, then falls linearly to zero.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warm = (warmup * total as f64).ceil() as usize;
    let t = step + 1;
    if t <= warm {
        base * t as f64 / warm as f64
    } else {
        base * (total.saturating_sub(step)) as f64 / (total - warm) as f64
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).rows(), store.get(id).cols())).collect();
        AdamW {
            cfg,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`. Single-row tensors (biases, norms)
    /// are not decayed; parameters without a gradient only decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let decay = if store.get(id).rows() > 1 { c.weight_decay } else { 0.0 };
            let grad = grads.param(id);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let p = store.get_mut(id);
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |t| t.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let update = (m.data()[i] / bc1) / ((v.data()[i] / bc2).sqrt() + c.eps);
                let w = &mut p.data_mut()[i];
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn schedule_shape() {
        let lrs: Vec<f64> = (0..100).map(|s| scheduled_lr(1.0, s, 100, 0.06)).collect();
        assert!((lrs[0] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(lrs[5], 1.0);
        assert_eq!(lrs[6], 1.0);
        assert!(lrs[7] < 1.0);
        assert!((lrs[99] - 1.0 / 94.0).abs() < 1e-15);
        assert!(lrs.windows(2).skip(5).all(|w| w[1] <= w[0]));
        assert_eq!(scheduled_lr(1.0, 0, 0, 0.06), 0.0);
        assert_eq!(scheduled_lr(1.0, 0, 1, 0.06), 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(2, 2, vec![3.0, -2.0, 1.5, 0.5]));
        let b = store.add("b", Tensor::row_vector(vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }, &store);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let (wv, bv) = (g.param(w), g.param(b));
                let w2 = g.mul(wv, wv);
                let b2 = g.mul(bv, bv);
                let (sw, sb) = (g.sum_all(w2), g.sum_all(b2));
                let loss = g.add(sw, sb);
                g.backward(loss)
            };
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(w).data().iter().chain(store.get(b).data()).all(|x| x.abs() < 1e-2));
        assert_eq!(opt.steps(), 2000);
    }

    #[test]
    fn decay_skips_single_row_tensors() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled(2, 1, 1.0));
        let b = store.add("b", Tensor::filled(1, 2, 1.0));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &store);
        let empty = {
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::filled(1, 1, 1.0));
            g.backward(x)
        };
        opt.step(&mut store, &empty, 0.1);
        assert!(store.get(w).data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}
