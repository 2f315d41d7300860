use serde::{Deserialize, Serialize};

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
pub fn cosine_warmup(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// Adaptive moments with decoupled weight decay on the flagged entries.
pub struct AdamW {
    cfg: AdamWConfig,
    decay: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, decay: Vec<bool>) -> Self {
        let n = decay.len();
        AdamW {
            cfg,
            decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let upd = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + eps);
            let wd = if self.decay[k] { weight_decay * params[k] } else { 0.0 };
            params[k] -= lr * (upd + wd);
        }
    }
}
