use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvSpec, DEFAULT_GRID};
use crate::ppo::PpoConfig;
use crate::predictor::PredictorConfig;
use crate::sweep::DEFAULT_SAT_THRESHOLD;
use crate::vae::{VaeConfig, VaeTrainConfig};
use crate::wm::{WmConfig, WmTrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub budget: usize,
    pub val_fraction: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            budget: 20_000,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            // reconstruction is a per-pixel mean; a larger KL weight erases
            // single-pixel sprites from the latent
            model: VaeConfig {
                kl_scale: 1e-5,
                ..VaeConfig::default()
            },
            train: VaeTrainConfig {
                lr: 1e-3,
                max_iters: 5000,
                eval_interval: 500,
                patience: 5,
                ..VaeTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmSection {
    pub model: WmConfig,
    pub train: WmTrainConfig,
}

impl Default for WmSection {
    fn default() -> Self {
        Self {
            model: WmConfig {
                context_steps: 8,
                ..WmConfig::default()
            },
            train: WmTrainConfig {
                lr: 3e-4,
                max_iters: 2000,
                eval_interval: 250,
                patience: 4,
                ..WmTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreamSection {
    pub ppo: PpoConfig,
    /// Imagined steps per rollout; the environment count is rescaled to
    /// keep `ppo.envs · ppo.horizon` steps per iteration.
    pub horizon: usize,
    pub seed_steps: usize,
}

impl Default for DreamSection {
    fn default() -> Self {
        Self {
            ppo: PpoConfig {
                max_iters: 100,
                ..PpoConfig::default()
            },
            horizon: 32,
            seed_steps: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Depths to sweep; empty disables the sweep stage.
    pub depths: Vec<usize>,
    pub seeds: usize,
    /// Train one model on all environments instead of one per environment.
    pub unified: bool,
    pub sat_threshold: f64,
    pub filter_trim: f64,
    pub filter_window: usize,
    /// Overrides for sweep training; the world-model section is the base.
    pub train: WmTrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            depths: Vec::new(),
            seeds: 8,
            unified: false,
            sat_threshold: DEFAULT_SAT_THRESHOLD,
            filter_trim: 0.2,
            filter_window: 10,
            train: WmSection::default().train,
        }
    }
}

/// Every hyperparameter of a run. Defaults are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub envs: Vec<String>,
    pub grid_size: usize,
    pub expert: PpoConfig,
    pub collect: CollectConfig,
    pub vae: VaeSection,
    pub wm: WmSection,
    pub predictor: PredictorConfig,
    pub dream: DreamSection,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            envs: vec!["LaneCross".to_string()],
            grid_size: DEFAULT_GRID,
            expert: PpoConfig {
                max_iters: 80,
                ..PpoConfig::default()
            },
            collect: CollectConfig::default(),
            vae: VaeSection::default(),
            wm: WmSection::default(),
            predictor: PredictorConfig {
                iters: 1500,
                ..PredictorConfig::default()
            },
            dream: DreamSection::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn env_specs(&self) -> Result<Vec<EnvSpec>, ConfigError> {
        self.envs
            .iter()
            .map(|name| {
                let base = EnvSpec::by_name(name).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                EnvSpec::new(base.kind, self.grid_size).map_err(|e| ConfigError::Invalid(e.to_string()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.envs.is_empty() {
            return bad("at least one environment is required".into());
        }
        self.env_specs()?;
        let obs = self.grid_size * self.grid_size;
        if self.vae.model.obs_dim != obs {
            return bad(format!("vae.model.obs_dim {} must equal grid_size² = {obs}", self.vae.model.obs_dim));
        }
        if self.wm.model.latent_dim != self.vae.model.latent_dim || self.predictor.latent_dim != self.vae.model.latent_dim
        {
            return bad("wm.model.latent_dim and predictor.latent_dim must equal vae.model.latent_dim".into());
        }
        self.wm.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.expert.validate().map_err(|e| ConfigError::Invalid(format!("expert: {e}")))?;
        self.dream
            .ppo
            .with_horizon(self.dream.horizon)
            .map_err(|e| ConfigError::Invalid(format!("dream: {e}")))?;
        if self.dream.seed_steps == 0 || self.dream.seed_steps > self.wm.model.context_steps {
            return bad(format!(
                "dream.seed_steps must lie in 1..={}",
                self.wm.model.context_steps
            ));
        }
        if !(self.collect.val_fraction > 0.0 && self.collect.val_fraction <= 0.5) {
            return bad("collect.val_fraction must lie in (0, 0.5]".into());
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be positive".into());
        }
        if !self.sweep.depths.is_empty() {
            if self.sweep.seeds == 0 {
                return bad("sweep.seeds must be positive".into());
            }
            if self.sweep.depths.windows(2).any(|w| w[0] >= w[1]) || self.sweep.depths[0] == 0 {
                return bad("sweep.depths must be positive and strictly increasing".into());
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[wm.model]\ndepth = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.wm.model.depth, 2);
        assert_eq!(c.wm.model.embed_dim, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sede = 3").is_err());
        assert!(RunConfig::from_toml_str("[wm.model]\ndepht = 2").is_err());
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        assert!(RunConfig::from_toml_str("[vae.model]\nlatent_dim = 8").is_err());
        assert!(RunConfig::from_toml_str("envs = [\"Pong\"]").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(content_hash(&a), content_hash(&b));
        b.wm.model.depth = 8;
        assert_ne!(content_hash(&a.wm), content_hash(&b.wm));
        assert_eq!(content_hash(&a.vae), content_hash(&b.vae));
    }
}
