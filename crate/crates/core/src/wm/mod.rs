//! Decoder-only transformer over interleaved `(z, a, r)` triplets.
//!
//! Step `t` occupies token positions `3t` (latent), `3t+1` (action) and
//! `3t+2` (reward). The next-latent head reads position `3t+2` and predicts
//! `z_{t+1}`; the reward head reads `3t+1` and predicts the reward token of
//! step `t`. Attention is causal, so neither head sees anything later.

mod imagine;
mod model;
mod train;

pub use imagine::{
    imagine, sample_seed, stack_frames, DreamOutcome, DreamState, ImaginedStep, Imaginer, SeedContext,
    FRAME_STACK,
};
pub use model::{StreamBatch, WmModel};
pub use train::{per_env_best, train_wm, BatchSampler, EncodedDataset, EnvWindows, WmTrainConfig};

use serde::{Deserialize, Serialize};

use crate::tensor::TensorError;

/// Number of reward-token classes: sign ∈ {−1, 0, +1} × terminated.
pub const REWARD_TOKENS: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum WmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stream of {steps} steps exceeds context of {max}")]
    ContextOverflow { steps: usize, max: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed stream: {0}")]
    Stream(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("no windows of {steps} steps available in {env}")]
    NoWindows { env: String, steps: usize },
    #[error("empty context")]
    EmptyContext,
    #[error(transparent)]
    Vae(#[from] crate::vae::VaeError),
    #[error(transparent)]
    Predictor(#[from] crate::predictor::PredictorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub context_steps: usize,
    /// Only 0.0 is supported.
    #[serde(default)]
    pub dropout: f64,
    pub reward_loss_weight: f64,
    pub latent_dim: usize,
    pub action_vocab: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            embed_dim: 64,
            heads: 4,
            context_steps: 32,
            dropout: 0.0,
            reward_loss_weight: 1e-5,
            latent_dim: 32,
            action_vocab: crate::env::global_vocab_size(),
            mlp_ratio: 4,
        }
    }
}

impl WmConfig {
    pub fn validate(&self) -> Result<(), WmError> {
        let bad = |m: String| Err(WmError::InvalidConfig(m));
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.context_steps == 0 {
            return bad("depth, embed_dim, heads and context_steps must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported".into());
        }
        if !(self.reward_loss_weight >= 0.0) || self.latent_dim == 0 || self.action_vocab == 0 {
            return bad("reward_loss_weight, latent_dim or action_vocab out of range".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn token_len(&self) -> usize {
        3 * self.context_steps
    }
}

/// Time-ordered `(z_t, a_t, r_t)` triplets. Latents are row-major
/// `[steps, latent_dim]`; actions are global ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletStream {
    pub latent_dim: usize,
    pub latents: Vec<f64>,
    pub actions: Vec<usize>,
    pub reward_tokens: Vec<usize>,
}

impl TripletStream {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            latents: Vec::new(),
            actions: Vec::new(),
            reward_tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn latent(&self, t: usize) -> &[f64] {
        &self.latents[t * self.latent_dim..(t + 1) * self.latent_dim]
    }

    pub fn push(&mut self, z: &[f64], action: usize, reward_token: usize) {
        self.latents.extend_from_slice(z);
        self.actions.push(action);
        self.reward_tokens.push(reward_token);
    }

    /// Drops the oldest steps until at most `max` remain.
    pub fn truncate_front(&mut self, max: usize) {
        if self.len() > max {
            let drop = self.len() - max;
            self.latents.drain(..drop * self.latent_dim);
            self.actions.drain(..drop);
            self.reward_tokens.drain(..drop);
        }
    }

    pub fn validate(&self, action_vocab: usize) -> Result<(), WmError> {
        let t = self.len();
        if self.latents.len() != t * self.latent_dim || self.reward_tokens.len() != t {
            return Err(WmError::Stream("component lengths differ".into()));
        }
        if self.actions.iter().any(|&a| a >= action_vocab) {
            return Err(WmError::Stream("action outside vocabulary".into()));
        }
        if self.reward_tokens.iter().any(|&r| r >= REWARD_TOKENS) {
            return Err(WmError::Stream("reward token outside [0, 6)".into()));
        }
        Ok(())
    }
}

/// Sign of a reward as −1, 0 or +1.
pub fn reward_sign(reward: f64) -> i8 {
    if reward > 0.0 {
        1
    } else if reward < 0.0 {
        -1
    } else {
        0
    }
}

/// `(sign(r) + 1) + 3·terminated`.
pub fn reward_token_encode(reward: f64, terminated: bool) -> usize {
    (reward_sign(reward) + 1) as usize + 3 * terminated as usize
}

/// Inverse of [`reward_token_encode`] on its image.
pub fn reward_token_decode(token: usize) -> (i8, bool) {
    ((token % 3) as i8 - 1, token >= 3)
}
