use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::StoreError;
use crate::env::{global_action_map, EnvSpec, Observation};
use crate::vae::{dequantize, Vae};
use crate::wm::EncodedDataset;

const MAGIC: &[u8; 4] = b"WMLD";
pub const DATASET_VERSION: u32 = 1;
const FLAG_TERMINATED: u8 = 1;
const FLAG_EPISODE_START: u8 = 2;

/// Offline transitions in collection order. Frame `i` is the observation
/// action `i` was taken in; pixels are stored as `round(255·p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub env_name: String,
    pub grid_size: usize,
    pub action_count: usize,
    pub seed: u64,
    pub frames: Vec<u8>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub episode_start: Vec<bool>,
}

pub fn quantize(p: f64) -> u8 {
    (255.0 * p).round().clamp(0.0, 255.0) as u8
}

impl TrajectoryDataset {
    pub fn new(spec: &EnvSpec, seed: u64) -> Self {
        Self {
            env_name: spec.name.clone(),
            grid_size: spec.grid_size,
            action_count: spec.action_count,
            seed,
            frames: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: Vec::new(),
            episode_start: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let p = self.obs_dim();
        &self.frames[i * p..(i + 1) * p]
    }

    pub fn frames_in(&self, range: Range<usize>) -> &[u8] {
        let p = self.obs_dim();
        &self.frames[range.start * p..range.end * p]
    }

    pub fn push(&mut self, obs: &Observation, action: usize, reward: f64, terminated: bool, episode_start: bool) {
        self.frames.extend(obs.pixels.iter().map(|&p| quantize(p)));
        self.actions.push(action as u8);
        self.rewards.push(reward);
        self.terminated.push(terminated);
        self.episode_start.push(episode_start);
    }

    /// Keeps the first `n` transitions.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            env_name: self.env_name.clone(),
            grid_size: self.grid_size,
            action_count: self.action_count,
            seed: self.seed,
            frames: self.frames[..n * self.obs_dim()].to_vec(),
            actions: self.actions[..n].to_vec(),
            rewards: self.rewards[..n].to_vec(),
            terminated: self.terminated[..n].to_vec(),
            episode_start: self.episode_start[..n].to_vec(),
        }
    }

    pub fn episode_count(&self) -> usize {
        self.episode_start.iter().filter(|&&s| s).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.frames.len() + self.len() * 10);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.env_name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.env_name.as_bytes());
        out.extend_from_slice(&(self.grid_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(self.frame(i));
            out.push(self.actions[i]);
            out.extend_from_slice(&self.rewards[i].to_le_bytes());
            let mut flags = 0;
            if self.terminated[i] {
                flags |= FLAG_TERMINATED;
            }
            if self.episode_start[i] {
                flags |= FLAG_EPISODE_START;
            }
            out.push(flags);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(StoreError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(StoreError::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let name_len = r.u16()? as usize;
        let env_name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| StoreError::Corrupt("env name".into()))?;
        let grid_size = r.u32()? as usize;
        let action_count = r.u32()? as usize;
        let count = r.u64()? as usize;
        let seed = r.u64()?;
        let p = grid_size * grid_size;
        let mut ds = Self {
            env_name,
            grid_size,
            action_count,
            seed,
            frames: Vec::with_capacity(count * p),
            actions: Vec::with_capacity(count),
            rewards: Vec::with_capacity(count),
            terminated: Vec::with_capacity(count),
            episode_start: Vec::with_capacity(count),
        };
        for _ in 0..count {
            ds.frames.extend_from_slice(r.take(p)?);
            ds.actions.push(r.take(1)?[0]);
            ds.rewards.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            let flags = r.take(1)?[0];
            ds.terminated.push(flags & FLAG_TERMINATED != 0);
            ds.episode_start.push(flags & FLAG_EPISODE_START != 0);
        }
        if r.pos != body.len() {
            return Err(StoreError::Corrupt(format!(
                "{} trailing bytes after {count} transitions",
                body.len() - r.pos
            )));
        }
        Ok(ds)
    }

    /// Latent means of every frame, with actions mapped to the shared
    /// vocabulary.
    pub fn encode(&self, vae: &Vae, spec: &EnvSpec) -> Result<EncodedDataset, StoreError> {
        let p = self.obs_dim();
        let mut latents = Vec::with_capacity(self.len() * vae.config.latent_dim);
        for chunk in self.frames.chunks(512 * p) {
            latents.extend(vae.encode(&dequantize(chunk))?.0);
        }
        let actions = self
            .actions
            .iter()
            .map(|&a| global_action_map(spec, a as usize))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EncodedDataset {
            env_name: self.env_name.clone(),
            latent_dim: vae.config.latent_dim,
            latents,
            actions,
            rewards: self.rewards.clone(),
            terminated: self.terminated.clone(),
            episode_start: self.episode_start.clone(),
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(StoreError::Corrupt("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<(), StoreError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset, StoreError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    TrajectoryDataset::from_bytes(&bytes)
}

/// Contiguous train/validation ranges; the boundary is an episode start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
}

/// Splits at the episode start nearest to `len·(1 − val_fraction)`.
pub fn split_dataset(ds: &TrajectoryDataset, val_fraction: f64) -> Result<DatasetSplit, StoreError> {
    split_episodes(&ds.env_name, &ds.episode_start, val_fraction)
}

/// [`split_dataset`] over bare episode-start flags.
pub fn split_episodes(name: &str, episode_start: &[bool], val_fraction: f64) -> Result<DatasetSplit, StoreError> {
    if !(val_fraction > 0.0 && val_fraction <= 0.5) {
        return Err(StoreError::Split(format!("validation fraction {val_fraction} outside (0, 0.5]")));
    }
    let n = episode_start.len();
    let target = n as f64 * (1.0 - val_fraction);
    let cut = (1..n)
        .filter(|&i| episode_start[i])
        .min_by(|&a, &b| {
            let (da, db) = ((a as f64 - target).abs(), (b as f64 - target).abs());
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
        .ok_or_else(|| StoreError::Split(format!("{name} has no episode boundary to split at")))?;
    Ok(DatasetSplit {
        train: 0..cut,
        val: cut..n,
    })
}
