use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

/// Scale factor that brings a gradient of norm `norm` within `clip`.
pub fn clip_global_norm(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// AdamW with bias-corrected moments, decoupled weight decay and global
/// gradient-norm clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64, TensorError> {
        if !grads.is_finite() {
            return Err(TensorError::NonFinite("gradient".into()));
        }
        let norm = grads.global_norm();
        let scale = self.config.grad_clip.map_or(1.0, |c| clip_global_norm(norm, c));
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = grads.grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if p.decay { c.lr * c.weight_decay } else { 0.0 };
            for (((w, &gr), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr * scale;
                *w -= decay * *w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}
