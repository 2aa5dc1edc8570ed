use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{reward_token_encode, StreamBatch, TripletStream, WmError, WmModel};
use crate::sweep::LossCurve;
use crate::tensor::{AdamW, AdamWConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Validation windows scored per environment at each evaluation.
    pub val_windows: usize,
    pub seed: u64,
}

impl Default for WmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            max_iters: 100_000,
            eval_interval: 1000,
            patience: 100,
            weight_decay: 0.1,
            grad_clip: 1.0,
            val_windows: 64,
            seed: 0,
        }
    }
}

/// One environment's transitions after encoding frames to latents.
/// Actions are global ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDataset {
    pub env_name: String,
    pub latent_dim: usize,
    pub latents: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub episode_start: Vec<bool>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn reward_token(&self, i: usize) -> usize {
        reward_token_encode(self.rewards[i], self.terminated[i])
    }

    /// Steps `[start, start + steps)` as a stream.
    pub fn stream(&self, start: usize, steps: usize) -> TripletStream {
        let mut s = TripletStream::new(self.latent_dim);
        for i in start..start + steps {
            s.push(self.latent(i), self.actions[i], self.reward_token(i));
        }
        s
    }

    /// Keeps only the first `n` transitions.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            env_name: self.env_name.clone(),
            latent_dim: self.latent_dim,
            latents: self.latents[..n * self.latent_dim].to_vec(),
            actions: self.actions[..n].to_vec(),
            rewards: self.rewards[..n].to_vec(),
            terminated: self.terminated[..n].to_vec(),
            episode_start: self.episode_start[..n].to_vec(),
        }
    }
}

/// An encoded dataset with its train/validation boundary. Windows are
/// drawn from `[0, train_end)` or `[train_end, len)`, never across.
#[derive(Debug, Clone)]
pub struct EnvWindows {
    pub data: EncodedDataset,
    pub train_end: usize,
}

impl EnvWindows {
    pub fn new(data: EncodedDataset, train_end: usize) -> Self {
        Self { data, train_end }
    }

    pub fn name(&self) -> &str {
        &self.data.env_name
    }

    pub fn train_starts(&self, steps: usize) -> usize {
        (self.train_end + 1).saturating_sub(steps)
    }

    pub fn val_starts(&self, steps: usize) -> usize {
        (self.data.len() - self.train_end + 1).saturating_sub(steps)
    }

    /// Up to `count` evenly spaced validation windows.
    pub fn val_windows(&self, steps: usize, count: usize) -> Vec<usize> {
        let n = self.val_starts(steps);
        let k = count.min(n);
        (0..k).map(|i| self.train_end + i * n / k).collect()
    }
}

/// Draws `(environment, window start)` pairs: environment uniformly, then
/// a window uniformly within that environment's training split.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    starts: Vec<usize>,
}

impl BatchSampler {
    pub fn new(envs: &[EnvWindows], steps: usize) -> Result<Self, WmError> {
        let starts: Vec<usize> = envs.iter().map(|e| e.train_starts(steps)).collect();
        if let Some(i) = starts.iter().position(|&n| n == 0) {
            return Err(WmError::NoWindows {
                env: envs[i].name().to_string(),
                steps,
            });
        }
        if envs.is_empty() {
            return Err(WmError::EmptyContext);
        }
        Ok(Self { starts })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let env = rng.gen_range(0..self.starts.len());
        (env, rng.gen_range(0..self.starts[env]))
    }
}

fn batch_of(envs: &[EnvWindows], picks: &[(usize, usize)], steps: usize) -> Result<StreamBatch, WmError> {
    let streams: Vec<TripletStream> = picks
        .iter()
        .map(|&(e, s)| envs[e].data.stream(s, steps))
        .collect();
    let refs: Vec<&TripletStream> = streams.iter().collect();
    StreamBatch::from_streams(&refs)
}

/// Mean total loss over each environment's validation windows.
fn evaluate(model: &WmModel, envs: &[EnvWindows], steps: usize, count: usize, bs: usize) -> Result<Vec<f64>, WmError> {
    envs.iter()
        .enumerate()
        .map(|(e, env)| {
            let starts = env.val_windows(steps, count);
            if starts.is_empty() {
                return Err(WmError::NoWindows {
                    env: env.name().to_string(),
                    steps,
                });
            }
            let mut total = 0.0;
            for chunk in starts.chunks(bs) {
                let picks: Vec<(usize, usize)> = chunk.iter().map(|&s| (e, s)).collect();
                let b = batch_of(envs, &picks, steps)?;
                total += model.loss(&b)?.0 * chunk.len() as f64;
            }
            Ok(total / starts.len() as f64)
        })
        .collect()
}

/// Trains on windows of `context_steps` steps with AdamW and early stopping
/// on validation loss. With more than one environment the curve also
/// carries per-environment validation series. Returns the best-validation
/// weights.
pub fn train_wm(
    mut model: WmModel,
    envs: &[EnvWindows],
    cfg: &WmTrainConfig,
) -> Result<(WmModel, LossCurve), WmError> {
    let steps = model.config.context_steps;
    let sampler = BatchSampler::new(envs, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            grad_clip: Some(cfg.grad_clip),
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let unified = envs.len() > 1;
    let mut curve = LossCurve::new(cfg.eval_interval);
    let mut best = model.params.clone();
    let record = |curve: &mut LossCurve, it: usize, train: f64, per_env: Vec<f64>| -> bool {
        let agg = per_env.iter().sum::<f64>() / per_env.len() as f64;
        if unified {
            for (env, v) in envs.iter().zip(&per_env) {
                curve.per_env_val.entry(env.name().to_string()).or_insert_with(Vec::new).push(*v);
            }
        }
        curve.record(it, train, agg)
    };
    let mut running = 0.0;
    let mut count = 0usize;
    for it in 0..cfg.max_iters {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
        let batch = batch_of(envs, &picks, steps)?;
        let (loss, grads) = {
            let mut tape = Tape::with_params(&model.params);
            let (total, _, _) = model.loss_var(&mut tape, &batch)?;
            tape.backward(total)?;
            (tape.value(total).item(), tape.param_grads())
        };
        if !loss.is_finite() {
            return Err(WmError::Diverged { iteration: it, loss });
        }
        if it == 0 {
            let v = evaluate(&model, envs, steps, cfg.val_windows, cfg.batch_size)?;
            record(&mut curve, 0, loss, v);
        }
        opt.step(&mut model.params, &grads)?;
        running += loss;
        count += 1;
        if (it + 1) % cfg.eval_interval == 0 {
            let v = evaluate(&model, envs, steps, cfg.val_windows, cfg.batch_size)?;
            if record(&mut curve, it + 1, running / count as f64, v) {
                best.copy_from(&model.params)?;
            }
            log::debug!(
                "wm iter {} train {:.6} val {:.6}",
                it + 1,
                running / count as f64,
                curve.val_loss.last().unwrap()
            );
            running = 0.0;
            count = 0;
            if curve.evals_since_best() >= cfg.patience {
                curve.stopped_early = true;
                break;
            }
        }
    }
    model.params.copy_from(&best)?;
    Ok((model, curve))
}

/// Per-environment map helper for reports.
pub fn per_env_best(curve: &LossCurve) -> BTreeMap<String, f64> {
    curve
        .per_env_val
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().cloned().fold(f64::INFINITY, f64::min)))
        .collect()
}
