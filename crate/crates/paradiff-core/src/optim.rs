//! Adaptive moment estimation with decoupled weight decay.

use crate::model::ParamStore;
use crate::real::Real;

/// AdamW over a [`ParamStore`]. Moment buffers are aligned with the store's
/// sorted parameter order; decay applies to matrices only (biases and norm
/// gains are 1-row vectors and skip it).
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(store: &ParamStore<R>, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, p)| vec![R::zero(); p.values.len()]).collect();
        let v = store.iter().map(|(_, p)| vec![R::zero(); p.values.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore<R>, lr: f64) {
        self.step += 1;
        let b1 = R::from_f64(self.beta1);
        let b2 = R::from_f64(self.beta2);
        let one = R::one();
        let bc1 = R::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = R::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let eps = R::from_f64(self.eps);
        let lr_r = R::from_f64(lr);
        let wd = R::from_f64(self.weight_decay);

        for (idx, (_, p)) in store.iter_mut().enumerate() {
            let decay = p.rows > 1 && p.cols > 1;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if decay {
                    upd += wd * p.values[i];
                }
                p.values[i] -= lr_r * upd;
            }
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero over the remaining
/// steps. `step` is zero-based.
pub fn warmup_cosine_lr(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
