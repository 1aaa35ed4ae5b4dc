//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! Implemented in-repo so the update rule (and therefore every training
//! trajectory) is pinned by this crate alone. Moment buffers are exposed for
//! checkpointing; restoring them plus the step counter reproduces an
//! uninterrupted run exactly.

use crate::math;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        let m = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        let v = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must be aligned with the set's registration order
    /// (as returned by `Bound::grads`). Non-trainable parameters are skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - math::pow(c.beta1, t as f64);
        let bc2 = 1.0 - math::pow(c.beta2, t as f64);
        params.update_each(|pid, tensor| {
            let g = grads[pid.index()].data();
            let m = &mut self.m[pid.index()];
            let v = &mut self.v[pid.index()];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = if bc1 == 0.0 { m[i] } else { m[i] / bc1 };
                let vhat = v[i] / bc2;
                data[i] -= c.lr * (mhat / (math::sqrt(vhat) + c.eps) + c.weight_decay * data[i]);
            }
        });
    }

    /// Moment buffers in registration order, for checkpointing.
    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len(), "moment buffer count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment buffer count mismatch");
        for (a, b) in m.iter().zip(&self.m) {
            assert_eq!(a.len(), b.len(), "moment buffer length mismatch");
        }
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::tape::Graph;

    #[test]
    fn converges_on_quadratic() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::vector(vec![4.0, -3.0]));
        let mut opt = AdamW::new(
            AdamWConfig { lr: 0.05, weight_decay: 0.0, ..AdamWConfig::default() },
            &ps,
        );
        for _ in 0..400 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let sq = g.mul(bound.node(w), bound.node(w));
            let loss = g.sum_all(sq);
            g.backward(loss);
            let grads = bound.grads(&g);
            opt.step(&mut ps, &grads);
        }
        for &x in ps.get(w).data() {
            assert!(x.abs() < 1e-2, "did not converge: {x}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::vector(vec![1.0]));
        let mut opt =
            AdamW::new(AdamWConfig { lr: 1.0, weight_decay: 0.1, ..AdamWConfig::default() }, &ps);
        let zero_grad = vec![Tensor::zeros(&[1])];
        opt.step(&mut ps, &zero_grad);
        let x = ps.get(w).data()[0];
        assert!((x - 0.9).abs() < 1e-12, "decay applied directly to weights: {x}");
    }

    #[test]
    fn restore_reproduces_trajectory() {
        let run = |resume_at: Option<u64>| -> Vec<f64> {
            let mut ps = ParamSet::new();
            let w = ps.add("w", Tensor::vector(vec![2.0, 2.0, 2.0]));
            let mut opt = AdamW::new(AdamWConfig::default(), &ps);
            let mut snapshot = None;
            let mut trace = Vec::new();
            for s in 0..20u64 {
                if Some(s) == resume_at {
                    // Simulate save + load: rebuild optimizer from state.
                    let (m, v) = opt.state();
                    snapshot = Some((opt.step_count(), m.to_vec(), v.to_vec()));
                    let (st, m, v) = snapshot.clone().unwrap();
                    opt = AdamW::new(AdamWConfig::default(), &ps);
                    opt.restore(st, m, v);
                }
                let mut g = Graph::new();
                let bound = ps.bind(&mut g);
                let sq = g.mul(bound.node(w), bound.node(w));
                let loss = g.sum_all(sq);
                g.backward(loss);
                let grads = bound.grads(&g);
                opt.step(&mut ps, &grads);
                trace.push(ps.get(w).data()[0]);
            }
            let _ = snapshot;
            trace
        };
        assert_eq!(run(None), run(Some(10)));
    }
}
