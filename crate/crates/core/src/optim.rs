//! AdamW with a linear warmup/decay schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, ParamStore};

/// Linear rise from 0 to `base_lr` over the first `warmup_ratio * total`
/// steps, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_ratio: f64, base_lr: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warmup = (warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A `max_norm` of 0 disables clipping.
pub fn clip_global_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. The decay shrinks parameters directly and never enters
    /// the moment estimates. Parameters without a gradient are only decayed.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id).data_mut();
            let decay = 1.0 - lr * self.weight_decay;
            for p in param.iter_mut() {
                *p *= decay;
            }
            let Some(grad) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, &g) in grad.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                param[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
