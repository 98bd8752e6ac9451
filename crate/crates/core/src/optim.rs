//! Decoupled-weight-decay Adam and a warm-up + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`; parameters without a gradient are
    /// only decayed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if grads.0.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "{} gradient slots for {} parameters",
                grads.0.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            if self.weight_decay != 0.0 {
                let k = 1.0 - lr * self.weight_decay;
                p.iter_mut().for_each(|x| *x *= k);
            }
            let Some(g) = &grads.0[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up to `peak` over `warmup` steps, then cosine decay to zero
/// at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm` (no-op for
/// `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule { peak: 2e-4, warmup: 5, total: 105 };
        assert!((s.lr(0) - 4e-5).abs() < 1e-18);
        assert!((s.lr(4) - 2e-4).abs() < 1e-18);
        assert!((s.lr(5) - 2e-4).abs() < 1e-18);
        assert!((s.lr(55) - 1e-4).abs() < 1e-15);
        assert!(s.lr(105).abs() < 1e-18);
        assert!(s.lr(500).abs() < 1e-18);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec([2], vec![3.0, -2.0])).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let x = store.get(id).data().to_vec();
            let mut g = Grads::zeros_like(&store);
            g.0[0] = Some(x.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut store, &g, 0.01).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros([2])).unwrap();
        let mut g = Grads::zeros_like(&store);
        g.0[0] = Some(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
