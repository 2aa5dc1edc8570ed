//! Proximal policy optimization shared by real-environment experts and
//! agents trained inside the world model, plus the offline collection
//! schedule.

mod policy;
mod rollout;
mod train;
mod update;

pub use policy::{sample_categorical, ActOutput, ActorCritic, PolicyConfig};
pub use rollout::{collect_rollout, DreamEnvs, FrameView, RealEnvs, RolloutBuffer, RolloutSource};
pub use train::{
    collect_offline, evaluate_policy, policy_config, random_policy_returns, train_expert, train_in_imagination, Collection,
    DreamCurve, DreamRunConfig, ReturnCurve,
};
pub use update::{ppo_loss_var, ppo_update, surrogate_objective, LossParts, Minibatch, UpdateStats};

use serde::{Deserialize, Serialize};

use crate::env::EnvError;
use crate::tensor::TensorError;
use crate::vae::VaeError;
use crate::wm::WmError;

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Wm(#[from] WmError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at iteration {iteration}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("normalized score undefined: expert return {expert} equals random return {random}")]
    UndefinedScore { random: f64, expert: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub surrogate_clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub value_clip: f64,
    pub grad_clip: f64,
    pub horizon: usize,
    pub envs: usize,
    pub epochs: usize,
    pub minibatch_iters: usize,
    pub lr: f64,
    pub target_kl: f64,
    pub kl_coef: f64,
    pub max_iters: usize,
    /// Evaluations without running-return improvement before stopping.
    pub patience: usize,
    /// Episodes in the running-return window.
    pub running_window: usize,
    pub hidden: Vec<usize>,
    pub adam_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            surrogate_clip: 0.2,
            entropy_coef: 0.005,
            value_coef: 0.5,
            value_clip: 0.1,
            grad_clip: 0.5,
            horizon: 128,
            envs: 16,
            epochs: 4,
            minibatch_iters: 8,
            lr: 2.5e-4,
            target_kl: 0.01,
            kl_coef: 1.5,
            max_iters: 50_000,
            patience: 300,
            running_window: 100,
            hidden: vec![128, 128],
            adam_eps: 1e-5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: String| Err(PpoError::InvalidConfig(m));
        if self.horizon == 0 || self.envs == 0 || self.epochs == 0 || self.minibatch_iters == 0 {
            return bad("horizon, envs, epochs and minibatch_iters must be positive".into());
        }
        if (self.horizon * self.envs) % self.minibatch_iters != 0 {
            return bad(format!(
                "{} steps per iteration do not split into {} minibatches",
                self.horizon * self.envs,
                self.minibatch_iters
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]".into());
        }
        if self.max_iters == 0 || self.running_window == 0 {
            return bad("max_iters and running_window must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_iteration(&self) -> usize {
        self.horizon * self.envs
    }

    pub fn minibatch_size(&self) -> usize {
        self.steps_per_iteration() / self.minibatch_iters
    }

    /// Linear decay from 1 at iteration 0 to 0 at `max_iters`.
    pub fn anneal(&self, iteration: usize) -> f64 {
        (1.0 - iteration as f64 / self.max_iters as f64).max(0.0)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.anneal(iteration)
    }

    /// Copy with the rollout horizon changed and the environment count
    /// scaled so steps per iteration are unchanged.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self, PpoError> {
        let steps = self.steps_per_iteration();
        if horizon == 0 || steps % horizon != 0 {
            return Err(PpoError::InvalidConfig(format!(
                "horizon {horizon} does not divide {steps} steps per iteration"
            )));
        }
        let out = Self {
            horizon,
            envs: steps / horizon,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }
}

/// Probability of a uniform random action at collection step `i`:
/// `1 − log₁₀(1+i)/5`, raised to 1 above 0.99 and floored at 0.
pub fn p_rand(i: usize) -> f64 {
    let p = 1.0 - ((1 + i) as f64).log10() / 5.0;
    if p > 0.99 {
        1.0
    } else {
        p.max(0.0)
    }
}

/// Generalized advantage estimates over `[envs, horizon]` buffers;
/// `values` is `[envs, horizon + 1]`. A done at `t` cuts bootstrapping
/// from `t + 1`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    envs: usize,
    horizon: usize,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = envs * horizon;
    if rewards.len() != n || dones.len() != n || values.len() != envs * (horizon + 1) {
        return Err(PpoError::Shape(format!(
            "gae over [{envs}, {horizon}]: {} rewards, {} dones, {} values",
            rewards.len(),
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; n];
    for b in 0..envs {
        let v = &values[b * (horizon + 1)..(b + 1) * (horizon + 1)];
        let mut next = 0.0;
        for t in (0..horizon).rev() {
            let i = b * horizon + t;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * live * v[t + 1] - v[t];
            next = delta + gamma * lambda * live * next;
            adv[i] = next;
        }
    }
    let returns = (0..n)
        .map(|i| adv[i] + values[(i / horizon) * (horizon + 1) + i % horizon])
        .collect();
    Ok((adv, returns))
}

/// `(policy − random) / (expert − random)`.
pub fn normalized_score(policy: f64, random: f64, expert: f64) -> Result<f64, PpoError> {
    let denom = expert - random;
    if denom.abs() < 1e-12 {
        return Err(PpoError::UndefinedScore { random, expert });
    }
    Ok((policy - random) / denom)
}
