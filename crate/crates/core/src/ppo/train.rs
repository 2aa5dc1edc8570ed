use std::collections::VecDeque;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rollout::episode_seed;
use super::{
    collect_rollout, p_rand, ppo_update, ActorCritic, DreamEnvs, FrameView, PolicyConfig, PpoConfig, PpoError,
    RealEnvs, RolloutSource,
};
use crate::env::{Env, EnvSpec};
use crate::store::TrajectoryDataset;
use crate::tensor::{AdamW, AdamWConfig};
use crate::wm::{stack_frames, EncodedDataset, Imaginer, FRAME_STACK};

fn optimizer(cfg: &PpoConfig, policy: &ActorCritic) -> AdamW {
    AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: cfg.adam_eps,
            weight_decay: 0.0,
            grad_clip: Some(cfg.grad_clip),
        },
        &policy.params,
    )
}

pub fn policy_config(spec: &EnvSpec, cfg: &PpoConfig) -> PolicyConfig {
    PolicyConfig {
        frame_dim: spec.obs_dim(),
        frame_stack: FRAME_STACK,
        hidden: cfg.hidden.clone(),
        actions: spec.action_count,
    }
}

/// Per-iteration progress of on-environment training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReturnCurve {
    pub iterations: Vec<usize>,
    pub env_steps: Vec<usize>,
    /// Mean of the last `running_window` episode returns, once the window
    /// is full.
    pub running_return: Vec<Option<f64>>,
    pub episode_returns: Vec<f64>,
    pub best_running: Option<f64>,
    pub best_iter: Option<usize>,
    pub stopped_early: bool,
}

/// On-environment PPO. Evaluations happen at every iteration once the
/// running window is full; training stops after `patience` evaluations
/// without improvement and the best-running-return weights are returned.
pub fn train_expert(spec: &EnvSpec, cfg: &PpoConfig, seed: u64) -> Result<(ActorCritic, ReturnCurve), PpoError> {
    cfg.validate()?;
    let mut policy = ActorCritic::new(policy_config(spec, cfg), seed)?;
    let mut opt = optimizer(cfg, &policy);
    let mut envs = RealEnvs::new(spec, cfg.envs, seed, FrameView::Raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let mut curve = ReturnCurve::default();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.running_window);
    let mut best = policy.params.clone();
    let mut since_best = 0usize;
    for it in 0..cfg.max_iters {
        let buf = collect_rollout(&policy, &mut envs, cfg, &mut rng)?;
        let stats = ppo_update(&mut policy, &mut opt, &buf, cfg, it, &mut rng)?;
        for r in envs.take_finished() {
            curve.episode_returns.push(r);
            window.push_back(r);
            if window.len() > cfg.running_window {
                window.pop_front();
            }
        }
        let running = (window.len() == cfg.running_window).then(|| window.iter().sum::<f64>() / window.len() as f64);
        curve.iterations.push(it);
        curve.env_steps.push((it + 1) * cfg.steps_per_iteration());
        curve.running_return.push(running);
        log::debug!("expert {} it {it}: running {running:?} {stats:?}", spec.name);
        if let Some(r) = running {
            if curve.best_running.map_or(true, |b| r > b) {
                curve.best_running = Some(r);
                curve.best_iter = Some(it);
                best = policy.params.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    curve.stopped_early = true;
                    break;
                }
            }
        }
    }
    if curve.best_running.is_some() {
        policy.params = best;
    }
    Ok((policy, curve))
}

/// Offline data plus, per step, whether the action was uniform random.
#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    pub dataset: TrajectoryDataset,
    pub random_action: Vec<bool>,
}

/// Gathers exactly `budget` transitions. At step `i` the action is uniform
/// with probability [`p_rand`]`(i)`, otherwise sampled from the expert.
pub fn collect_offline(
    spec: &EnvSpec,
    expert: &ActorCritic,
    budget: usize,
    seed: u64,
) -> Result<Collection, PpoError> {
    if expert.config.actions != spec.action_count || expert.config.frame_dim != spec.obs_dim() {
        return Err(PpoError::Shape(format!("expert {:?} does not fit {}", expert.config, spec.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = TrajectoryDataset::new(spec, seed);
    let mut random_action = Vec::with_capacity(budget);
    let mut episodes = 0u64;
    let (mut env, mut obs) = Env::reset(spec, episode_seed(seed, episodes))?;
    let mut stack: VecDeque<Vec<f64>> = VecDeque::from(vec![obs.pixels.clone()]);
    let mut start = true;
    for i in 0..budget {
        let random = rng.gen::<f64>() < p_rand(i);
        let action = if random {
            rng.gen_range(0..spec.action_count)
        } else {
            expert.act(&stack_frames(&stack), &mut rng)?.actions[0]
        };
        let out = env.step(action)?;
        dataset.push(&obs, action, out.reward, out.terminated, start);
        random_action.push(random);
        start = false;
        if out.terminated {
            episodes += 1;
            (env, obs) = Env::reset(spec, episode_seed(seed, episodes))?;
            stack = VecDeque::from(vec![obs.pixels.clone()]);
            start = true;
        } else {
            obs = out.observation;
            stack.push_back(obs.pixels.clone());
            if stack.len() > FRAME_STACK {
                stack.pop_front();
            }
        }
    }
    Ok(Collection { dataset, random_action })
}

/// Undiscounted returns of `episodes` full episodes with sampled actions.
pub fn evaluate_policy(
    policy: &ActorCritic,
    spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    view: FrameView<'_>,
) -> Result<Vec<f64>, PpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let mut envs = Vec::with_capacity(episodes);
    let mut stacks = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let (env, obs) = Env::reset(spec, episode_seed(seed, k as u64))?;
        envs.push(env);
        stacks.push(VecDeque::from(vec![view.apply(&obs.pixels)?]));
    }
    let mut returns = vec![0.0; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    while !active.is_empty() {
        let obs: Vec<f64> = active.iter().flat_map(|&e| stack_frames(&stacks[e])).collect();
        let out = policy.act(&obs, &mut rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (&e, &a) in active.iter().zip(&out.actions) {
            let step = envs[e].step(a)?;
            returns[e] += step.reward;
            if !step.terminated {
                let s: &mut VecDeque<Vec<f64>> = &mut stacks[e];
                s.push_back(view.apply(&step.observation.pixels)?);
                if s.len() > FRAME_STACK {
                    s.pop_front();
                }
                still.push(e);
            }
        }
        active = still;
    }
    Ok(returns)
}

/// Returns of a uniform random policy.
pub fn random_policy_returns(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<Vec<f64>, PpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a4d);
    (0..episodes)
        .map(|k| {
            let (mut env, _) = Env::reset(spec, episode_seed(seed, k as u64))?;
            let mut total = 0.0;
            loop {
                let out = env.step(rng.gen_range(0..spec.action_count))?;
                total += out.reward;
                if out.terminated {
                    return Ok(total);
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreamRunConfig {
    pub horizon: usize,
    /// Real triplets given as context before imagining.
    pub seed_steps: usize,
    pub seed: u64,
}

/// Per-iteration statistics of training in imagination.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DreamCurve {
    pub envs: usize,
    pub horizon: usize,
    pub steps_per_iteration: usize,
    pub mean_reward: Vec<f64>,
    pub episodes_ended: Vec<usize>,
    pub entropy: Vec<f64>,
    pub collapse_warnings: usize,
}

/// Number of consecutive collapsed iterations that triggers a warning.
const COLLAPSE_WARN_ITERS: usize = 100;

/// PPO where every rollout comes from imagination. The environment count
/// is rescaled from `cfg` so steps per iteration match `cfg` at any
/// horizon. Seed contexts are drawn from `seed_range` of `data`.
pub fn train_in_imagination(
    imaginer: Imaginer<'_>,
    spec: &EnvSpec,
    data: &EncodedDataset,
    seed_range: Range<usize>,
    cfg: &PpoConfig,
    run: &DreamRunConfig,
) -> Result<(ActorCritic, DreamCurve), PpoError> {
    let cfg = cfg.with_horizon(run.horizon)?;
    let mut policy = ActorCritic::new(policy_config(spec, &cfg), run.seed)?;
    let mut opt = optimizer(&cfg, &policy);
    let mut dreams = DreamEnvs::new(imaginer, spec, data, seed_range, run.seed_steps, cfg.envs, run.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0xd7ea);
    let mut curve = DreamCurve {
        envs: cfg.envs,
        horizon: cfg.horizon,
        steps_per_iteration: cfg.steps_per_iteration(),
        ..DreamCurve::default()
    };
    let mut collapsed_run = 0usize;
    for it in 0..cfg.max_iters {
        let buf = collect_rollout(&policy, &mut dreams, &cfg, &mut rng)?;
        let stats = ppo_update(&mut policy, &mut opt, &buf, &cfg, it, &mut rng)?;
        dreams.take_finished();
        curve.mean_reward.push(buf.rewards.iter().sum::<f64>() / buf.len() as f64);
        curve.episodes_ended.push(dreams.ended_lengths.len());
        curve.entropy.push(stats.entropy);
        if dreams.collapsed() {
            collapsed_run += 1;
            if collapsed_run == COLLAPSE_WARN_ITERS {
                log::warn!(
                    "imagined episodes of {} ended after one step for {COLLAPSE_WARN_ITERS} iterations",
                    spec.name
                );
                curve.collapse_warnings += 1;
                collapsed_run = 0;
            }
        } else {
            collapsed_run = 0;
        }
        log::debug!("dream {} it {it}: reward {:.4} {stats:?}", spec.name, curve.mean_reward[it]);
    }
    Ok((policy, curve))
}
