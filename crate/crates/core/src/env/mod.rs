//! Seeded toy environments standing in for the Atari suite.
//!
//! Four families, each designed around one scaling regime:
//! [`LaneCross`](EnvKind::LaneCross) (saturated), [`ScrollShoot`](EnvKind::ScrollShoot)
//! (monotonic), [`MazeChase`](EnvKind::MazeChase) (classical) and
//! [`BounceCourt`](EnvKind::BounceCourt) (canonical). Observations are
//! single-channel `G×G` grids in `[0, 1]`, and `(seed, actions)` fully
//! determines every transition.

mod bounce_court;
mod lane_cross;
mod maze_chase;
mod scroll_shoot;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sweep::RegimeLabel;

pub use bounce_court::BounceCourt;
pub use lane_cross::LaneCross;
pub use maze_chase::MazeChase;
pub use scroll_shoot::ScrollShoot;

pub const DEFAULT_GRID: usize = 16;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("action {action} out of range for {env} ({count} actions)")]
    InvalidAction {
        env: String,
        action: usize,
        count: usize,
    },
    #[error("step called on a terminated episode of {0}; reset first")]
    EpisodeOver(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvKind {
    LaneCross,
    ScrollShoot,
    MazeChase,
    BounceCourt,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::LaneCross,
        EnvKind::ScrollShoot,
        EnvKind::MazeChase,
        EnvKind::BounceCourt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::LaneCross => "LaneCross",
            EnvKind::ScrollShoot => "ScrollShoot",
            EnvKind::MazeChase => "MazeChase",
            EnvKind::BounceCourt => "BounceCourt",
        }
    }

    fn action_count(self) -> usize {
        match self {
            EnvKind::LaneCross => 3,
            EnvKind::ScrollShoot => 4,
            EnvKind::MazeChase => 5,
            EnvKind::BounceCourt => 3,
        }
    }

    fn max_steps(self) -> usize {
        match self {
            EnvKind::LaneCross => 160,
            EnvKind::ScrollShoot => 400,
            EnvKind::MazeChase => 300,
            EnvKind::BounceCourt => 400,
        }
    }

    fn regime_hint(self) -> RegimeLabel {
        match self {
            EnvKind::LaneCross => RegimeLabel::Saturated,
            EnvKind::ScrollShoot => RegimeLabel::Monotonic,
            EnvKind::MazeChase => RegimeLabel::Classical,
            EnvKind::BounceCourt => RegimeLabel::Canonical,
        }
    }

    /// Local action → slot in the shared vocabulary
    /// `[noop, up, down, left, right]`.
    fn global_actions(self) -> &'static [usize] {
        match self {
            EnvKind::LaneCross => &[0, 1, 2],
            // fire shoots upward, so it shares the "up" slot
            EnvKind::ScrollShoot => &[0, 3, 4, 1],
            EnvKind::MazeChase => &[0, 1, 2, 3, 4],
            EnvKind::BounceCourt => &[0, 3, 4],
        }
    }
}

/// Static description of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub grid_size: usize,
    pub action_count: usize,
    pub max_episode_steps: usize,
    /// Design intent only; nothing in training reads it.
    pub regime_hint: RegimeLabel,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, grid_size: usize) -> Result<Self, EnvError> {
        let spec = Self {
            name: kind.name().to_string(),
            kind,
            grid_size,
            action_count: kind.action_count(),
            max_episode_steps: kind.max_steps(),
            regime_hint: kind.regime_hint(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn by_name(name: &str) -> Result<Self, EnvError> {
        let kind = EnvKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| EnvError::UnknownEnv(name.to_string()))?;
        Self::new(kind, DEFAULT_GRID)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.grid_size < 8 {
            return Err(EnvError::InvalidSpec(format!("grid size {} < 8", self.grid_size)));
        }
        if self.action_count < 2 || self.action_count != self.kind.action_count() {
            return Err(EnvError::InvalidSpec(format!(
                "{} needs {} actions",
                self.name,
                self.kind.action_count()
            )));
        }
        if self.max_episode_steps == 0 {
            return Err(EnvError::InvalidSpec("max_episode_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.grid_size * self.grid_size
    }

    fn check_action(&self, action: usize) -> Result<(), EnvError> {
        if action >= self.action_count {
            return Err(EnvError::InvalidAction {
                env: self.name.clone(),
                action,
                count: self.action_count,
            });
        }
        Ok(())
    }
}

/// All four families at the default grid size.
pub fn registry() -> Vec<EnvSpec> {
    EnvKind::ALL
        .into_iter()
        .map(|k| EnvSpec::new(k, DEFAULT_GRID).expect("built-in specs are valid"))
        .collect()
}

/// Size of the shared action vocabulary (the largest action set).
pub fn global_vocab_size() -> usize {
    EnvKind::ALL.iter().map(|k| k.action_count()).max().unwrap()
}

pub fn global_action_map(spec: &EnvSpec, local: usize) -> Result<usize, EnvError> {
    spec.check_action(local)?;
    Ok(spec.kind.global_actions()[local])
}

/// Inverse of [`global_action_map`]; `None` if the slot is unused by `spec`.
pub fn local_action(spec: &EnvSpec, global: usize) -> Option<usize> {
    spec.kind.global_actions().iter().position(|&g| g == global)
}

/// `G×G` grayscale frame, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grid: usize,
    pub pixels: Vec<f64>,
}

impl Observation {
    pub fn blank(grid: usize) -> Self {
        Self {
            grid,
            pixels: vec![0.0; grid * grid],
        }
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.grid + col] = v;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.grid + col]
    }

    /// Binary PGM (P5) dump, 8-bit.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.grid, self.grid).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }
}

/// One stored environment step: the observation the action was taken in,
/// the action, and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
}

pub(crate) trait Game {
    /// Advances one step; returns (reward, game-over).
    fn advance(&mut self, action: usize, rng: &mut ChaCha8Rng) -> (f64, bool);
    fn render(&self) -> Observation;
}

#[derive(Debug, Clone)]
enum GameState {
    LaneCross(LaneCross),
    ScrollShoot(ScrollShoot),
    MazeChase(MazeChase),
    BounceCourt(BounceCourt),
}

impl GameState {
    fn game(&self) -> &dyn Game {
        match self {
            GameState::LaneCross(g) => g,
            GameState::ScrollShoot(g) => g,
            GameState::MazeChase(g) => g,
            GameState::BounceCourt(g) => g,
        }
    }

    fn game_mut(&mut self) -> &mut dyn Game {
        match self {
            GameState::LaneCross(g) => g,
            GameState::ScrollShoot(g) => g,
            GameState::MazeChase(g) => g,
            GameState::BounceCourt(g) => g,
        }
    }
}

/// A running episode. Termination latches until a new `reset`.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: GameState,
    rng: ChaCha8Rng,
    steps: usize,
    terminated: bool,
}

impl Env {
    pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(Env, Observation), EnvError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = spec.grid_size;
        let state = match spec.kind {
            EnvKind::LaneCross => GameState::LaneCross(LaneCross::new(g, &mut rng)),
            EnvKind::ScrollShoot => GameState::ScrollShoot(ScrollShoot::new(g, &mut rng)),
            EnvKind::MazeChase => GameState::MazeChase(MazeChase::new(g, &mut rng)),
            EnvKind::BounceCourt => GameState::BounceCourt(BounceCourt::new(g, &mut rng)),
        };
        let env = Env {
            spec: spec.clone(),
            state,
            rng,
            steps: 0,
            terminated: false,
        };
        let obs = env.observation();
        Ok((env, obs))
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn observation(&self) -> Observation {
        self.state.game().render()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome, EnvError> {
        if self.terminated {
            return Err(EnvError::EpisodeOver(self.spec.name.clone()));
        }
        self.spec.check_action(action)?;
        let (reward, over) = self.state.game_mut().advance(action, &mut self.rng);
        self.steps += 1;
        self.terminated = over || self.steps >= self.spec.max_episode_steps;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminated: self.terminated,
        })
    }

    pub fn lane_cross(&self) -> Option<&LaneCross> {
        match &self.state {
            GameState::LaneCross(g) => Some(g),
            _ => None,
        }
    }

    pub fn lane_cross_mut(&mut self) -> Option<&mut LaneCross> {
        match &mut self.state {
            GameState::LaneCross(g) => Some(g),
            _ => None,
        }
    }

    pub fn scroll_shoot_mut(&mut self) -> Option<&mut ScrollShoot> {
        match &mut self.state {
            GameState::ScrollShoot(g) => Some(g),
            _ => None,
        }
    }

    pub fn maze_chase_mut(&mut self) -> Option<&mut MazeChase> {
        match &mut self.state {
            GameState::MazeChase(g) => Some(g),
            _ => None,
        }
    }

    pub fn bounce_court_mut(&mut self) -> Option<&mut BounceCourt> {
        match &mut self.state {
            GameState::BounceCourt(g) => Some(g),
            _ => None,
        }
    }
}
