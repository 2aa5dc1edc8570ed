use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::ppo::{ActorCritic, PolicyConfig};
use crate::predictor::{Predictor, PredictorConfig, PredictorKind};
use crate::tensor::ParamStore;
use crate::vae::{Vae, VaeConfig};
use crate::wm::{WmConfig, WmModel};

const MAGIC: &[u8; 4] = b"WMLC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model whose structure is fully determined by a serializable state.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    fn state(&self) -> Value;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Same layout as the saved model; values are overwritten on load.
    fn rebuild(state: &Value) -> Result<Self, StoreError>;
}

fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, StoreError> {
    serde_json::from_value(v.clone()).map_err(|e| StoreError::Corrupt(format!("checkpoint state: {e}")))
}

impl Checkpointable for Vae {
    const KIND: &'static str = "vae";
    fn state(&self) -> Value {
        json!(self.config)
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn rebuild(state: &Value) -> Result<Self, StoreError> {
        Ok(Vae::new(parse::<VaeConfig>(state)?, 0))
    }
}

impl Checkpointable for WmModel {
    const KIND: &'static str = "world-model";
    fn state(&self) -> Value {
        json!(self.config)
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn rebuild(state: &Value) -> Result<Self, StoreError> {
        WmModel::new(parse::<WmConfig>(state)?, 0).map_err(|e| StoreError::Corrupt(e.to_string()))
    }
}

impl Checkpointable for ActorCritic {
    const KIND: &'static str = "policy";
    fn state(&self) -> Value {
        json!(self.config)
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn rebuild(state: &Value) -> Result<Self, StoreError> {
        ActorCritic::new(parse::<PolicyConfig>(state)?, 0).map_err(|e| StoreError::Corrupt(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorState {
    kind: PredictorKind,
    config: PredictorConfig,
    smoothing: f64,
    class_weights: Vec<f64>,
}

impl Checkpointable for Predictor {
    const KIND: &'static str = "predictor";
    fn state(&self) -> Value {
        json!(PredictorState {
            kind: self.kind,
            config: self.config.clone(),
            smoothing: self.smoothing,
            class_weights: self.class_weights.clone(),
        })
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn rebuild(state: &Value) -> Result<Self, StoreError> {
        let s: PredictorState = parse(state)?;
        let mut p = Predictor::new(s.kind, s.config, 0);
        p.smoothing = s.smoothing;
        p.class_weights = s.class_weights;
        Ok(p)
    }
}

/// Provenance stored beside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub iteration: usize,
    pub best_metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    state: Value,
    manifest: Vec<(String, Vec<usize>)>,
    meta: CheckpointMeta,
}

/// `WMLC | version u32 | header length u32 | JSON header | f64 LE values |
/// SHA-256 of everything before`.
pub fn checkpoint_bytes<M: Checkpointable>(model: &M, meta: &CheckpointMeta) -> Vec<u8> {
    let header = Header {
        kind: M::KIND.to_string(),
        state: model.state(),
        manifest: model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect(),
        meta: meta.clone(),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    let values = model.params().flatten();
    let mut out = Vec::with_capacity(12 + h.len() + values.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn checkpoint_from_bytes<M: Checkpointable>(bytes: &[u8]) -> Result<(M, CheckpointMeta), StoreError> {
    if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(StoreError::Checksum);
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(StoreError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let hend = 12 + hlen;
    if hend > body.len() {
        return Err(StoreError::Corrupt("header length past end of file".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[12..hend]).map_err(|e| StoreError::Corrupt(format!("checkpoint header: {e}")))?;
    if header.kind != M::KIND {
        return Err(StoreError::Corrupt(format!(
            "checkpoint holds a {} model, expected {}",
            header.kind,
            M::KIND
        )));
    }
    let mut model = M::rebuild(&header.state)?;
    let layout: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    if layout != header.manifest {
        return Err(StoreError::Corrupt("parameter manifest does not match the model layout".into()));
    }
    let payload = &body[hend..];
    if payload.len() != model.params().num_scalars() * 8 {
        return Err(StoreError::Corrupt(format!(
            "{} payload bytes for {} parameters",
            payload.len(),
            model.params().num_scalars()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model
        .params_mut()
        .unflatten(&values)
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
    Ok((model, header.meta))
}

pub fn save_checkpoint<M: Checkpointable>(model: &M, meta: &CheckpointMeta, path: &Path) -> Result<(), StoreError> {
    std::fs::write(path, checkpoint_bytes(model, meta))?;
    Ok(())
}

pub fn load_checkpoint<M: Checkpointable>(path: &Path) -> Result<(M, CheckpointMeta), StoreError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String, StoreError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wm::TripletStream;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 3,
            config_hash: "abc".into(),
            iteration: 10,
            best_metric: Some(0.5),
        }
    }

    #[test]
    fn vae_round_trip_is_bitwise() {
        let vae = Vae::new(
            VaeConfig {
                obs_dim: 16,
                hidden: 8,
                latent_dim: 3,
                kl_scale: 1.0,
            },
            9,
        );
        let (back, m): (Vae, _) = checkpoint_from_bytes(&checkpoint_bytes(&vae, &meta())).unwrap();
        assert_eq!(m, meta());
        let probe: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let (a, b) = (vae.encode(&probe).unwrap(), back.encode(&probe).unwrap());
        assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn wm_round_trip_is_bitwise() {
        let cfg = WmConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            context_steps: 4,
            latent_dim: 2,
            ..WmConfig::default()
        };
        let wm = WmModel::new(cfg, 4).unwrap();
        let (back, _): (WmModel, _) = checkpoint_from_bytes(&checkpoint_bytes(&wm, &meta())).unwrap();
        let mut s = TripletStream::new(2);
        s.push(&[0.1, -0.2], 1, 0);
        s.push(&[0.3, 0.4], 2, 1);
        let (a, b) = (wm.forward(&s).unwrap(), back.forward(&s).unwrap());
        assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn predictor_keeps_selection_state() {
        let mut p = Predictor::new(
            PredictorKind::Termination,
            PredictorConfig {
                latent_dim: 2,
                hidden: 4,
                ..PredictorConfig::default()
            },
            1,
        );
        p.smoothing = 0.1;
        p.class_weights = vec![0.6, 3.0];
        let bytes = checkpoint_bytes(&p, &meta());
        let (back, _): (Predictor, _) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.smoothing, 0.1);
        assert_eq!(back.class_weights, vec![0.6, 3.0]);
        assert_eq!(back.params, p.params);
        assert_eq!(checkpoint_bytes(&back, &meta()), bytes);
    }

    #[test]
    fn wrong_kind_and_corruption_are_rejected() {
        let vae = Vae::new(
            VaeConfig {
                obs_dim: 4,
                hidden: 2,
                latent_dim: 1,
                kl_scale: 1.0,
            },
            0,
        );
        let mut bytes = checkpoint_bytes(&vae, &meta());
        assert!(checkpoint_from_bytes::<WmModel>(&bytes).is_err());
        let n = bytes.len();
        bytes[n - 40] ^= 0xff;
        assert!(matches!(checkpoint_from_bytes::<Vae>(&bytes), Err(StoreError::Checksum)));
    }
}
