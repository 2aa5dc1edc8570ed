//! Gaussian-latent VAE over flattened grayscale frames.
//!
//! Inputs are pixels in `[0, 1]`; the encoder sees them shifted to
//! `(p - 0.5) / 0.5`. The decoder ends in a sigmoid so reconstructions stay
//! in `[0, 1]`. All sampling noise is passed in by the caller.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sweep::LossCurve;
use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum VaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("empty observation set")]
    Empty,
    #[error("observation length {got} does not match obs_dim {want}")]
    Shape { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Weight of the KL term.
    pub kl_scale: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            obs_dim: 256,
            hidden: 128,
            latent_dim: 32,
            kl_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub grad_clip: f64,
    /// Cap on validation frames scored per evaluation.
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            max_iters: 100_000,
            eval_interval: 1000,
            patience: 100,
            grad_clip: 1.0,
            val_samples: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
}

/// Loss parts as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon_mse: f64,
    pub kl: f64,
}

impl Vae {
    /// Fresh model; the encoder's last layer starts at zero so every frame
    /// initially maps to `μ = 0, log σ² = 0`.
    pub fn new(config: VaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (p, h, z) = (config.obs_dim, config.hidden, config.latent_dim);
        let encoder = Mlp::new(&mut params, "vae.enc", &[p, h, 2 * z], Activation::Elu, &mut rng);
        let decoder = Mlp::new(&mut params, "vae.dec", &[z, h, p], Activation::Elu, &mut rng);
        encoder.zero_last(&mut params);
        Self {
            config,
            params,
            encoder,
            decoder,
        }
    }

    /// `pixels: [B, obs_dim]` → `(μ, log σ²)`, each `[B, latent_dim]`.
    pub fn encode_var(&self, tape: &mut Tape, pixels: Var) -> Result<(Var, Var), TensorError> {
        let x = tape.add_scalar(pixels, -0.5);
        let x = tape.scale(x, 2.0);
        let h = self.encoder.forward(tape, x)?;
        let z = self.config.latent_dim;
        let mu = tape.narrow(h, 1, 0, z)?;
        let logvar = tape.narrow(h, 1, z, z)?;
        Ok((mu, logvar))
    }

    pub fn decode_var(&self, tape: &mut Tape, z: Var) -> Result<Var, TensorError> {
        let logits = self.decoder.forward(tape, z)?;
        Ok(tape.sigmoid(logits))
    }

    /// Returns `(total, recon_mse, kl)` nodes.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        pixels: Var,
        noise: Var,
    ) -> Result<(Var, Var, Var), TensorError> {
        let batch = tape.shape(pixels)[0] as f64;
        let (mu, logvar) = self.encode_var(tape, pixels)?;
        let z = sample_latent_var(tape, mu, logvar, noise)?;
        let recon = self.decode_var(tape, z)?;
        let recon_mse = tape.mse(recon, pixels)?;
        let mu2 = tape.square(mu);
        let var = tape.exp(logvar);
        let s = tape.add(mu2, var)?;
        let s = tape.sub(s, logvar)?;
        let s = tape.add_scalar(s, -1.0);
        let s = tape.sum(s);
        let kl = tape.scale(s, 0.5 / batch);
        let weighted = tape.scale(kl, self.config.kl_scale);
        let total = tape.add(recon_mse, weighted)?;
        Ok((total, recon_mse, kl))
    }

    fn check(&self, pixels: &[f64]) -> Result<usize, VaeError> {
        let p = self.config.obs_dim;
        if pixels.is_empty() || pixels.len() % p != 0 {
            return Err(VaeError::Shape {
                got: pixels.len(),
                want: p,
            });
        }
        Ok(pixels.len() / p)
    }

    /// Batched encode of row-major frames.
    pub fn encode(&self, pixels: &[f64]) -> Result<(Vec<f64>, Vec<f64>), VaeError> {
        let b = self.check(pixels)?;
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(Tensor::new(vec![b, self.config.obs_dim], pixels.to_vec())?);
        let (mu, lv) = self.encode_var(&mut tape, x)?;
        Ok((tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec()))
    }

    /// Batched decode of row-major latents.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, VaeError> {
        let d = self.config.latent_dim;
        if z.is_empty() || z.len() % d != 0 {
            return Err(VaeError::Shape { got: z.len(), want: d });
        }
        let mut tape = Tape::with_params(&self.params);
        let zv = tape.constant(Tensor::new(vec![z.len() / d, d], z.to_vec())?);
        let out = self.decode_var(&mut tape, zv)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn loss(&self, pixels: &[f64], noise: &[f64]) -> Result<VaeLoss, VaeError> {
        let b = self.check(pixels)?;
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(Tensor::new(vec![b, self.config.obs_dim], pixels.to_vec())?);
        let n = tape.constant(Tensor::new(vec![b, self.config.latent_dim], noise.to_vec())?);
        let (t, r, k) = self.loss_var(&mut tape, x, n)?;
        Ok(VaeLoss {
            total: tape.value(t).item(),
            recon_mse: tape.value(r).item(),
            kl: tape.value(k).item(),
        })
    }

    /// Per-pixel MSE of `decode(μ(o))` against `o`, averaged over frames.
    pub fn recon_mse(&self, frames: &[u8]) -> Result<f64, VaeError> {
        let p = self.config.obs_dim;
        let n = frames.len() / p;
        if n == 0 {
            return Err(VaeError::Empty);
        }
        let mut total = 0.0;
        for chunk in frames.chunks(p * 256) {
            let x = dequantize(chunk);
            let (mu, _) = self.encode(&x)?;
            let rec = self.decode(&mu)?;
            total += rec.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / (n * p) as f64)
    }
}

pub fn sample_latent_var(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var, TensorError> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.mul(std, noise)?;
    tape.add(mu, eps)
}

/// `z = μ + exp(log σ² / 2) ⊙ noise`.
pub fn sample_latent(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
        .collect()
}

/// `KL(N(μ, σ²) ‖ N(0, I))` for one latent vector.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

pub fn dequantize(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// MSE of predicting every frame by the per-pixel mean frame.
pub fn mean_image_mse(frames: &[u8], obs_dim: usize) -> f64 {
    let n = frames.len() / obs_dim;
    let mut mean = vec![0.0; obs_dim];
    for f in frames.chunks(obs_dim) {
        for (m, &b) in mean.iter_mut().zip(f) {
            *m += b as f64 / 255.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut se = 0.0;
    for f in frames.chunks(obs_dim) {
        for (m, &b) in mean.iter().zip(f) {
            let d = b as f64 / 255.0 - m;
            se += d * d;
        }
    }
    se / (n * obs_dim) as f64
}

/// Trains with Adam (no weight decay) and early stopping on validation loss
/// scored at `z = μ`. Returns the best-validation weights and the curve.
/// `train` and `val` are concatenated quantized frames.
pub fn train_vae(
    mut vae: Vae,
    train: &[u8],
    val: &[u8],
    cfg: &VaeTrainConfig,
) -> Result<(Vae, LossCurve), VaeError> {
    let p = vae.config.obs_dim;
    let d = vae.config.latent_dim;
    let n_train = train.len() / p;
    let n_val = val.len() / p;
    if n_train == 0 || n_val == 0 {
        return Err(VaeError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            grad_clip: Some(cfg.grad_clip),
            ..AdamWConfig::default()
        },
        &vae.params,
    );
    let val_n = n_val.min(cfg.val_samples);
    let stride = (n_val / val_n).max(1);
    let val_frames: Vec<u8> = (0..val_n)
        .flat_map(|i| val[i * stride * p..(i * stride + 1) * p].iter().copied())
        .collect();
    let eval = |vae: &Vae| -> Result<f64, VaeError> {
        let mut total = 0.0;
        for chunk in val_frames.chunks(p * 256) {
            let x = dequantize(chunk);
            let b = x.len() / p;
            total += vae.loss(&x, &vec![0.0; b * d])?.total * b as f64;
        }
        Ok(total / val_n as f64)
    };

    let mut curve = LossCurve::new(cfg.eval_interval);
    let mut best = vae.params.clone();
    let mut running = 0.0;
    let mut count = 0usize;
    let bs = cfg.batch_size.min(n_train);
    for it in 0..cfg.max_iters {
        let mut x = Vec::with_capacity(bs * p);
        for _ in 0..bs {
            let i = rand::Rng::gen_range(&mut rng, 0..n_train);
            x.extend(train[i * p..(i + 1) * p].iter().map(|&b| b as f64 / 255.0));
        }
        let noise: Vec<f64> = (0..bs * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (loss, grads) = {
            let mut tape = Tape::with_params(&vae.params);
            let xv = tape.constant(Tensor::new(vec![bs, p], x)?);
            let nv = tape.constant(Tensor::new(vec![bs, d], noise)?);
            let (total, _, _) = vae.loss_var(&mut tape, xv, nv)?;
            tape.backward(total)?;
            (tape.value(total).item(), tape.param_grads())
        };
        if !loss.is_finite() {
            return Err(VaeError::Diverged { iteration: it, loss });
        }
        if it == 0 {
            curve.record(0, loss, eval(&vae)?);
        }
        opt.step(&mut vae.params, &grads)?;
        running += loss;
        count += 1;
        if (it + 1) % cfg.eval_interval == 0 {
            let v = eval(&vae)?;
            if curve.record(it + 1, running / count as f64, v) {
                best.copy_from(&vae.params)?;
            }
            running = 0.0;
            count = 0;
            log::debug!("vae iter {} train {:.5} val {:.5}", it + 1, curve.train_loss.last().unwrap(), v);
            if curve.evals_since_best() >= cfg.patience {
                curve.stopped_early = true;
                break;
            }
        }
    }
    vae.params.copy_from(&best)?;
    Ok((vae, curve))
}
