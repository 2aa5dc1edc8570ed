use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PpoError;
use crate::tensor::nn::{Activation, Linear, Mlp};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub frame_dim: usize,
    pub frame_stack: usize,
    pub hidden: Vec<usize>,
    pub actions: usize,
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.frame_dim * self.frame_stack
    }
}

/// Shared ELU trunk over stacked frames with an action-logit head and a
/// scalar value head. Both heads read the trunk's last hidden layer.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub config: PolicyConfig,
    pub params: ParamStore,
    trunk: Mlp,
    actor: Linear,
    critic: Linear,
}

/// Sampled actions with their log-probabilities and value estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

impl ActorCritic {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, PpoError> {
        if config.hidden.is_empty() || config.actions == 0 || config.input_dim() == 0 {
            return Err(PpoError::InvalidConfig(format!("policy config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut dims = vec![config.input_dim()];
        dims.extend_from_slice(&config.hidden);
        let trunk = Mlp::new(&mut params, "pi.trunk", &dims, Activation::Elu, &mut rng);
        let h = *config.hidden.last().unwrap();
        // small actor init keeps the initial policy near uniform
        let actor = Linear::new(&mut params, "pi.actor", h, config.actions, 0.01, &mut rng);
        let critic = Linear::new(&mut params, "pi.critic", h, 1, (1.0 / h as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            params,
            trunk,
            actor,
            critic,
        })
    }

    /// `obs [N, input_dim]` to `(logits [N, A], values [N])`.
    pub fn forward_var(&self, tape: &mut Tape, obs: Var) -> Result<(Var, Var), TensorError> {
        let n = tape.shape(obs)[0];
        let h = self.trunk.forward(tape, obs)?;
        let h = tape.elu(h);
        let logits = self.actor.forward(tape, h)?;
        let v = self.critic.forward(tape, h)?;
        let v = tape.reshape(v, &[n])?;
        Ok((logits, v))
    }

    fn obs_tensor(&self, obs: &[f64]) -> Result<Tensor, PpoError> {
        let d = self.config.input_dim();
        if obs.is_empty() || obs.len() % d != 0 {
            return Err(PpoError::Shape(format!("{} observation values for input dim {d}", obs.len())));
        }
        Ok(Tensor::new(vec![obs.len() / d, d], obs.to_vec())?)
    }

    /// Action log-probabilities `[N, A]` and values `[N]`.
    pub fn evaluate(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(self.obs_tensor(obs)?);
        let (logits, v) = self.forward_var(&mut tape, x)?;
        let lp = tape.log_softmax(logits);
        Ok((tape.value(lp).data().to_vec(), tape.value(v).data().to_vec()))
    }

    pub fn values(&self, obs: &[f64]) -> Result<Vec<f64>, PpoError> {
        Ok(self.evaluate(obs)?.1)
    }

    /// Samples one action per row of `obs`.
    pub fn act<R: Rng>(&self, obs: &[f64], rng: &mut R) -> Result<ActOutput, PpoError> {
        let (lp, values) = self.evaluate(obs)?;
        let a = self.config.actions;
        let mut actions = Vec::with_capacity(values.len());
        let mut log_probs = Vec::with_capacity(values.len());
        for row in lp.chunks(a) {
            let k = sample_categorical(row, rng);
            actions.push(k);
            log_probs.push(row[k]);
        }
        Ok(ActOutput {
            actions,
            log_probs,
            values,
        })
    }
}

/// Draws an index from log-probabilities.
pub fn sample_categorical<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return k;
        }
    }
    log_probs.len() - 1
}
