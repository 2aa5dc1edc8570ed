use rand::seq::SliceRandom;
use rand::Rng;

use super::{ActorCritic, PpoConfig, PpoError, RolloutBuffer};
use crate::tensor::{AdamW, Tape, Tensor, Var};

/// Per-sample clipped objective `min(ρA, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn surrogate_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Training samples for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub kl_penalized: bool,
}

/// `policy_loss + c_v·value_loss − c_e·entropy`, plus `kl_coef·KL` when the
/// approximate KL `mean(old_logp − new_logp)` exceeds `target_kl`.
pub fn ppo_loss_var(
    policy: &ActorCritic,
    tape: &mut Tape,
    mb: &Minibatch,
    cfg: &PpoConfig,
) -> Result<(Var, LossParts), PpoError> {
    let n = mb.len();
    let d = policy.config.input_dim();
    let obs = tape.constant(Tensor::new(vec![n, d], mb.observations.clone())?);
    let (logits, values) = policy.forward_var(tape, obs)?;
    let logp_all = tape.log_softmax(logits);
    let logp = tape.gather_last(logp_all, &mb.actions)?;

    let old_logp = tape.constant(Tensor::vector(mb.old_log_probs.clone()));
    let adv = tape.constant(Tensor::vector(mb.advantages.clone()));
    let log_ratio = tape.sub(logp, old_logp)?;
    let ratio = tape.exp(log_ratio);
    let unclipped = tape.mul(ratio, adv)?;
    let eps = cfg.surrogate_clip;
    let clipped_ratio = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let objective = tape.minimum(unclipped, clipped)?;
    let obj_mean = tape.mean(objective);
    let policy_loss = tape.scale(obj_mean, -1.0);

    let old_v = tape.constant(Tensor::vector(mb.old_values.clone()));
    let ret = tape.constant(Tensor::vector(mb.returns.clone()));
    let dv = tape.sub(values, old_v)?;
    let dv = tape.clamp(dv, -cfg.value_clip, cfg.value_clip);
    let v_clipped = tape.add(old_v, dv)?;
    let e1 = tape.sub(values, ret)?;
    let e1 = tape.square(e1);
    let e2 = tape.sub(v_clipped, ret)?;
    let e2 = tape.square(e2);
    let worst = tape.maximum(e1, e2)?;
    let vmean = tape.mean(worst);
    let value_loss = tape.scale(vmean, 0.5);

    let probs = tape.exp(logp_all);
    let plogp = tape.mul(probs, logp_all)?;
    let neg_h = tape.sum_last(plogp);
    let neg_h = tape.mean(neg_h);
    let entropy = tape.scale(neg_h, -1.0);

    let kl_terms = tape.sub(old_logp, logp)?;
    let kl = tape.mean(kl_terms);

    let vl = tape.scale(value_loss, cfg.value_coef);
    let el = tape.scale(entropy, -cfg.entropy_coef);
    let mut total = tape.add(policy_loss, vl)?;
    total = tape.add(total, el)?;
    let approx_kl = tape.value(kl).item();
    let kl_penalized = approx_kl > cfg.target_kl;
    if kl_penalized {
        let pen = tape.scale(kl, cfg.kl_coef);
        total = tape.add(total, pen)?;
    }
    let parts = LossParts {
        policy: tape.value(policy_loss).item(),
        value: tape.value(value_loss).item(),
        entropy: tape.value(entropy).item(),
        approx_kl,
        kl_penalized,
    };
    Ok((total, parts))
}

/// Means over all minibatch steps of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub kl_penalty_steps: usize,
}

/// `epochs` passes of `minibatch_iters` shuffled minibatches over `buf`,
/// with advantages normalized to zero mean and unit variance first.
pub fn ppo_update<R: Rng>(
    policy: &mut ActorCritic,
    opt: &mut AdamW,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    iteration: usize,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    let n = buf.len();
    let mb_size = n / cfg.minibatch_iters;
    if mb_size == 0 || n % cfg.minibatch_iters != 0 {
        return Err(PpoError::InvalidConfig(format!(
            "{n} samples do not split into {} minibatches",
            cfg.minibatch_iters
        )));
    }
    let adv = normalize(&buf.advantages);
    opt.set_lr(cfg.lr_at(iteration));
    let d = policy.config.input_dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb_size) {
            let mut observations = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                observations.extend_from_slice(buf.observation(i));
            }
            let mb = Minibatch {
                observations,
                actions: chunk.iter().map(|&i| buf.actions[i]).collect(),
                old_log_probs: chunk.iter().map(|&i| buf.log_probs[i]).collect(),
                old_values: chunk.iter().map(|&i| buf.value_at(i)).collect(),
                advantages: chunk.iter().map(|&i| adv[i]).collect(),
                returns: chunk.iter().map(|&i| buf.returns[i]).collect(),
            };
            let (loss, parts, grads) = {
                let mut tape = Tape::with_params(&policy.params);
                let (loss, parts) = ppo_loss_var(policy, &mut tape, &mb, cfg)?;
                tape.backward(loss)?;
                (tape.value(loss).item(), parts, tape.param_grads())
            };
            if !loss.is_finite() {
                return Err(PpoError::Diverged { iteration, loss });
            }
            stats.grad_norm += opt.step(&mut policy.params, &grads)?;
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.approx_kl += parts.approx_kl;
            stats.kl_penalty_steps += parts.kl_penalized as usize;
            steps += 1;
        }
    }
    let k = steps as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let s = var.sqrt() + 1e-8;
    xs.iter().map(|x| (x - m) / s).collect()
}
