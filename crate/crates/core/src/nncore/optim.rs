use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::param::ParamStore;

/// AdamW with decoupled weight decay. Parameters whose `trainable` flag is
/// false are never touched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `grads` is indexed by parameter id; missing entries count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
        for id in ids {
            let Some(Some(g)) = grads.get(id.index()) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
            let vals = store.values_mut(id);
            for (((p, &gg), mm), vv) in
                vals.iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice())
            {
                *mm = b1 * *mm + (1.0 - b1) * gg;
                *vv = b2 * *vv + (1.0 - b2) * gg * gg;
                let update = (*mm / bc1) / ((*vv / bc2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().flatten().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = total.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}
