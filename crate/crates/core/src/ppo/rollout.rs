use std::collections::VecDeque;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gae, ActorCritic, PpoConfig, PpoError};
use crate::env::{global_action_map, Env, EnvSpec};
use crate::vae::Vae;
use crate::wm::{stack_frames, DreamState, EncodedDataset, Imaginer, SeedContext, FRAME_STACK};

/// One iteration of experience laid out `[envs, horizon]`, with values
/// `[envs, horizon + 1]` including the bootstrap column.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub envs: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(envs: usize, horizon: usize, obs_dim: usize) -> Self {
        let n = envs * horizon;
        Self {
            envs,
            horizon,
            obs_dim,
            observations: vec![0.0; n * obs_dim],
            actions: vec![0; n],
            log_probs: vec![0.0; n],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            values: vec![0.0; envs * (horizon + 1)],
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.envs * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    /// Value estimate of flat sample `i = b·horizon + t`.
    pub fn value_at(&self, i: usize) -> f64 {
        self.values[(i / self.horizon) * (self.horizon + 1) + i % self.horizon]
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<(), PpoError> {
        let (a, r) = gae(&self.rewards, &self.values, &self.dones, self.envs, self.horizon, gamma, lambda)?;
        self.advantages = a;
        self.returns = r;
        Ok(())
    }
}

/// A batch of environments stepped in lockstep. Episodes that end are
/// restarted inside `step`.
pub trait RolloutSource {
    fn num_envs(&self) -> usize;
    /// Called once before each iteration's rollout.
    fn begin_iteration(&mut self) -> Result<(), PpoError> {
        Ok(())
    }
    /// Current stacked observations, `[envs, FRAME_STACK·frame_dim]`.
    fn observations(&self) -> Vec<f64>;
    /// Applies local actions; returns rewards and episode-end flags.
    fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, Vec<bool>), PpoError>;
    /// Returns of episodes finished since the last call.
    fn take_finished(&mut self) -> Vec<f64>;
}

/// Runs `policy` for `horizon` steps and fills a buffer with advantages.
pub fn collect_rollout<R: Rng>(
    policy: &ActorCritic,
    source: &mut dyn RolloutSource,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<RolloutBuffer, PpoError> {
    let (b, t_max) = (source.num_envs(), cfg.horizon);
    let d = policy.config.input_dim();
    let mut buf = RolloutBuffer::new(b, t_max, d);
    source.begin_iteration()?;
    for t in 0..t_max {
        let obs = source.observations();
        let out = policy.act(&obs, rng)?;
        let (rewards, dones) = source.step(&out.actions)?;
        for e in 0..b {
            let i = e * t_max + t;
            buf.observations[i * d..(i + 1) * d].copy_from_slice(&obs[e * d..(e + 1) * d]);
            buf.actions[i] = out.actions[e];
            buf.log_probs[i] = out.log_probs[e];
            buf.rewards[i] = rewards[e];
            buf.dones[i] = dones[e];
            buf.values[e * (t_max + 1) + t] = out.values[e];
        }
    }
    let last = policy.values(&source.observations())?;
    for (e, v) in last.into_iter().enumerate() {
        buf.values[e * (t_max + 1) + t_max] = v;
    }
    buf.compute_advantages(cfg.gamma, cfg.lambda)?;
    Ok(buf)
}

/// How a real frame is shown to a policy.
#[derive(Debug, Clone, Copy)]
pub enum FrameView<'a> {
    Raw,
    /// `decode(μ(frame))`, matching what a policy trained in imagination saw.
    Reconstructed(&'a Vae),
}

impl FrameView<'_> {
    pub fn apply(&self, pixels: &[f64]) -> Result<Vec<f64>, PpoError> {
        match self {
            FrameView::Raw => Ok(pixels.to_vec()),
            FrameView::Reconstructed(vae) => {
                let (mu, _) = vae.encode(pixels)?;
                Ok(vae.decode(&mu)?)
            }
        }
    }
}

/// Real environments with per-env frame stacks.
pub struct RealEnvs<'a> {
    spec: EnvSpec,
    view: FrameView<'a>,
    envs: Vec<Env>,
    stacks: Vec<VecDeque<Vec<f64>>>,
    running: Vec<f64>,
    finished: Vec<f64>,
    base_seed: u64,
    episodes_started: u64,
}

impl<'a> RealEnvs<'a> {
    pub fn new(spec: &EnvSpec, count: usize, seed: u64, view: FrameView<'a>) -> Result<Self, PpoError> {
        let mut s = Self {
            spec: spec.clone(),
            view,
            envs: Vec::with_capacity(count),
            stacks: Vec::with_capacity(count),
            running: vec![0.0; count],
            finished: Vec::new(),
            base_seed: seed,
            episodes_started: 0,
        };
        for _ in 0..count {
            let (env, stack) = s.fresh()?;
            s.envs.push(env);
            s.stacks.push(stack);
        }
        Ok(s)
    }

    fn fresh(&mut self) -> Result<(Env, VecDeque<Vec<f64>>), PpoError> {
        let seed = episode_seed(self.base_seed, self.episodes_started);
        self.episodes_started += 1;
        let (env, obs) = Env::reset(&self.spec, seed)?;
        let mut stack = VecDeque::with_capacity(FRAME_STACK);
        stack.push_back(self.view.apply(&obs.pixels)?);
        Ok((env, stack))
    }
}

/// Seed of the `k`-th episode started under `base`.
pub(crate) fn episode_seed(base: u64, k: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

impl RolloutSource for RealEnvs<'_> {
    fn num_envs(&self) -> usize {
        self.envs.len()
    }

    fn observations(&self) -> Vec<f64> {
        self.stacks.iter().flat_map(stack_frames).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, Vec<bool>), PpoError> {
        let mut rewards = Vec::with_capacity(actions.len());
        let mut dones = Vec::with_capacity(actions.len());
        for (e, &a) in actions.iter().enumerate() {
            let out = self.envs[e].step(a)?;
            self.running[e] += out.reward;
            rewards.push(out.reward);
            dones.push(out.terminated);
            if out.terminated {
                self.finished.push(std::mem::take(&mut self.running[e]));
                let (env, stack) = self.fresh()?;
                self.envs[e] = env;
                self.stacks[e] = stack;
            } else {
                let s = &mut self.stacks[e];
                s.push_back(self.view.apply(&out.observation.pixels)?);
                if s.len() > FRAME_STACK {
                    s.pop_front();
                }
            }
        }
        Ok((rewards, dones))
    }

    fn take_finished(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.finished)
    }
}

/// Imagined environments driven by a frozen world model. Every iteration
/// restarts all rollouts from fresh real contexts.
pub struct DreamEnvs<'a> {
    imaginer: Imaginer<'a>,
    spec: EnvSpec,
    data: &'a EncodedDataset,
    range: Range<usize>,
    seed_steps: usize,
    states: Vec<DreamState>,
    running: Vec<f64>,
    lengths: Vec<usize>,
    finished: Vec<f64>,
    /// Lengths of episodes that ended during the current iteration.
    pub ended_lengths: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> DreamEnvs<'a> {
    pub fn new(
        imaginer: Imaginer<'a>,
        spec: &EnvSpec,
        data: &'a EncodedDataset,
        range: Range<usize>,
        seed_steps: usize,
        count: usize,
        seed: u64,
    ) -> Result<Self, PpoError> {
        let mut s = Self {
            imaginer,
            spec: spec.clone(),
            data,
            range,
            seed_steps,
            states: Vec::with_capacity(count),
            running: vec![0.0; count],
            lengths: vec![0; count],
            finished: Vec::new(),
            ended_lengths: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        for _ in 0..count {
            let st = s.fresh()?;
            s.states.push(st);
        }
        Ok(s)
    }

    fn fresh(&mut self) -> Result<DreamState, PpoError> {
        let seed = SeedContext::sample(self.data, self.range.clone(), self.seed_steps, &mut self.rng)?;
        Ok(self.imaginer.start(&seed)?)
    }

    /// True when every episode ended this iteration lasted one step and no
    /// environment got further.
    pub fn collapsed(&self) -> bool {
        !self.ended_lengths.is_empty()
            && self.ended_lengths.iter().all(|&l| l == 1)
            && self.lengths.iter().all(|&l| l <= 1)
    }
}

impl RolloutSource for DreamEnvs<'_> {
    fn num_envs(&self) -> usize {
        self.states.len()
    }

    fn begin_iteration(&mut self) -> Result<(), PpoError> {
        for e in 0..self.states.len() {
            self.states[e] = self.fresh()?;
            self.running[e] = 0.0;
            self.lengths[e] = 0;
        }
        self.ended_lengths.clear();
        Ok(())
    }

    fn observations(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.stacked()).collect()
    }

    fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, Vec<bool>), PpoError> {
        let globals = actions
            .iter()
            .map(|&a| global_action_map(&self.spec, a))
            .collect::<Result<Vec<_>, _>>()?;
        let outcomes = self.imaginer.step(&mut self.states, &globals)?;
        let mut rewards = Vec::with_capacity(actions.len());
        let mut dones = Vec::with_capacity(actions.len());
        for (e, o) in outcomes.iter().enumerate() {
            self.running[e] += o.reward;
            self.lengths[e] += 1;
            rewards.push(o.reward);
            dones.push(o.done);
            if o.done {
                self.finished.push(std::mem::take(&mut self.running[e]));
                self.ended_lengths.push(std::mem::take(&mut self.lengths[e]));
                self.states[e] = self.fresh()?;
            }
        }
        Ok((rewards, dones))
    }

    fn take_finished(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.finished)
    }
}
