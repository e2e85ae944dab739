//! Learning-rate schedule and Adam with coupled L2 weight decay.

use crate::params::ParamStore;
use crate::tensor::Matrix;

use super::config::TrainConfig;

/// Learning rate for 1-based `epoch`: a linear ramp to `lr0` over the
/// warm-up epochs, then `lr0` decayed by `decay_factor` once per completed
/// `decay_period` after warm-up.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let epoch = epoch.max(1);
    if epoch <= cfg.warmup_epochs {
        return cfg.lr0 * (epoch as f64 / cfg.warmup_epochs as f64);
    }
    let periods = (epoch - cfg.warmup_epochs - 1) / cfg.decay_period;
    cfg.lr0 * cfg.decay_factor.powi(periods as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[k]` is the gradient of parameter `k` (`None` for
    /// parameters the loss does not reach, which still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let grad = grads[k].as_ref();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..param.len() {
                let theta = param.data()[i];
                let g = grad.map_or(0.0, |g| g.data()[i]) + self.weight_decay * theta;
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                param.data_mut()[i] = theta - lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}
