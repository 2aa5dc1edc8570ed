use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TripletStream, WmConfig, WmError, REWARD_TOKENS};
use crate::tensor::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// Equal-length streams packed row-major for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub batch: usize,
    pub steps: usize,
    /// `[batch, steps, latent_dim]`
    pub latents: Vec<f64>,
    /// `[batch, steps]`
    pub actions: Vec<usize>,
    /// `[batch, steps]`
    pub reward_tokens: Vec<usize>,
}

impl StreamBatch {
    pub fn from_streams(streams: &[&TripletStream]) -> Result<Self, WmError> {
        let first = streams.first().ok_or(WmError::EmptyContext)?;
        let steps = first.len();
        if steps == 0 {
            return Err(WmError::EmptyContext);
        }
        let mut out = Self {
            batch: streams.len(),
            steps,
            latents: Vec::with_capacity(streams.len() * first.latents.len()),
            actions: Vec::with_capacity(streams.len() * steps),
            reward_tokens: Vec::with_capacity(streams.len() * steps),
        };
        for s in streams {
            if s.len() != steps || s.latent_dim != first.latent_dim {
                return Err(WmError::Stream("batched streams must share length and latent size".into()));
            }
            out.latents.extend_from_slice(&s.latents);
            out.actions.extend_from_slice(&s.actions);
            out.reward_tokens.extend_from_slice(&s.reward_tokens);
        }
        Ok(out)
    }
}

/// Transformer world model. Parameters live in `params`; the remaining
/// fields are handles into it, rebuilt deterministically from the config.
#[derive(Debug, Clone)]
pub struct WmModel {
    pub config: WmConfig,
    pub params: ParamStore,
    latent_in: Linear,
    action_emb: ParamId,
    reward_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    latent_head: Mlp,
    reward_head: Mlp,
}

impl WmModel {
    pub fn new(config: WmConfig, seed: u64) -> Result<Self, WmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let dz = config.latent_dim;
        let latent_in = Linear::new(&mut params, "wm.z_in", dz, d, (1.0 / dz as f64).sqrt(), &mut rng);
        let action_emb = params.add(
            "wm.a_emb",
            Tensor::randn(&[config.action_vocab, d], EMBED_STD, &mut rng),
            true,
        );
        let reward_emb = params.add(
            "wm.r_emb",
            Tensor::randn(&[REWARD_TOKENS, d], EMBED_STD, &mut rng),
            true,
        );
        let pos_emb = params.add(
            "wm.pos",
            Tensor::randn(&[config.token_len(), d], EMBED_STD, &mut rng),
            true,
        );
        let resid_std = (1.0 / d as f64).sqrt() / (2.0 * config.depth as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|l| {
                let name = format!("wm.block{l}");
                let ln_attn = LayerNorm::new(&mut params, &format!("{name}.ln1"), d);
                let qkv = Linear::new(&mut params, &format!("{name}.qkv"), d, 3 * d, (1.0 / d as f64).sqrt(), &mut rng);
                let proj = Linear::new(&mut params, &format!("{name}.proj"), d, d, resid_std, &mut rng);
                let ln_mlp = LayerNorm::new(&mut params, &format!("{name}.ln2"), d);
                let mlp = Mlp::new(
                    &mut params,
                    &format!("{name}.mlp"),
                    &[d, config.mlp_ratio * d, d],
                    Activation::Gelu,
                    &mut rng,
                );
                // residual branches shrink with depth
                let last = mlp.layers.last().unwrap().w;
                let shrink = (2.0 * config.depth as f64).sqrt();
                params.get_mut(last).data_mut().iter_mut().for_each(|w| *w /= shrink);
                Block {
                    ln_attn,
                    qkv,
                    proj,
                    ln_mlp,
                    mlp,
                }
            })
            .collect();
        let ln_final = LayerNorm::new(&mut params, "wm.ln_f", d);
        let latent_head = Mlp::new(&mut params, "wm.z_head", &[d, d, dz], Activation::Gelu, &mut rng);
        let reward_head = Mlp::new(&mut params, "wm.r_head", &[d, d, REWARD_TOKENS], Activation::Gelu, &mut rng);
        Ok(Self {
            config,
            params,
            latent_in,
            action_emb,
            reward_emb,
            pos_emb,
            blocks,
            ln_final,
            latent_head,
            reward_head,
        })
    }

    fn check(&self, batch: &StreamBatch) -> Result<(), WmError> {
        let c = &self.config;
        if batch.steps == 0 || batch.batch == 0 {
            return Err(WmError::EmptyContext);
        }
        if batch.steps > c.context_steps {
            return Err(WmError::ContextOverflow {
                steps: batch.steps,
                max: c.context_steps,
            });
        }
        let n = batch.batch * batch.steps;
        if batch.latents.len() != n * c.latent_dim
            || batch.actions.len() != n
            || batch.reward_tokens.len() != n
        {
            return Err(WmError::Stream("batch component lengths differ".into()));
        }
        if batch.actions.iter().any(|&a| a >= c.action_vocab) {
            return Err(WmError::Stream("action outside vocabulary".into()));
        }
        if batch.reward_tokens.iter().any(|&r| r >= REWARD_TOKENS) {
            return Err(WmError::Stream("reward token outside [0, 6)".into()));
        }
        Ok(())
    }

    /// Final-normed hidden states `[B, 3T, d]`.
    pub fn trunk(&self, tape: &mut Tape, batch: &StreamBatch) -> Result<Var, WmError> {
        self.check(batch)?;
        let c = &self.config;
        let (b, t, d, dz) = (batch.batch, batch.steps, c.embed_dim, c.latent_dim);
        let z = tape.constant(Tensor::new(vec![b * t, dz], batch.latents.clone())?);
        let z = self.latent_in.forward(tape, z)?;
        let a_table = tape.param(self.action_emb);
        let a = tape.index_select(a_table, 0, &batch.actions)?;
        let r_table = tape.param(self.reward_emb);
        let r = tape.index_select(r_table, 0, &batch.reward_tokens)?;
        let z = tape.reshape(z, &[b * t, 1, d])?;
        let a = tape.reshape(a, &[b * t, 1, d])?;
        let r = tape.reshape(r, &[b * t, 1, d])?;
        let x = tape.concat(&[z, a, r], 1)?;
        let n = 3 * t;
        let x = tape.reshape(x, &[b, n, d])?;
        let pos = tape.param(self.pos_emb);
        let pos = tape.narrow(pos, 0, 0, n)?;
        let mut x = tape.add_broadcast(x, pos)?;
        for block in &self.blocks {
            x = self.block(tape, block, x, b, n)?;
        }
        Ok(self.ln_final.forward(tape, x)?)
    }

    fn block(&self, tape: &mut Tape, blk: &Block, x: Var, b: usize, n: usize) -> Result<Var, WmError> {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let dh = d / h;
        let y = blk.ln_attn.forward(tape, x)?;
        let qkv = blk.qkv.forward(tape, y)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, b * h, n, dh])?;
        let mut qkv_parts = [x; 3];
        for (i, part) in qkv_parts.iter_mut().enumerate() {
            let p = tape.narrow(qkv, 0, i, 1)?;
            *part = tape.reshape(p, &[b * h, n, dh])?;
        }
        let [q, k, v] = qkv_parts;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.mask_future(scores)?;
        let att = tape.softmax(scores, 2)?;
        let o = tape.bmm(att, v, false)?;
        let o = tape.reshape(o, &[b, h, n, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, n, d])?;
        let o = blk.proj.forward(tape, o)?;
        let x = tape.add(x, o)?;
        let y = blk.ln_mlp.forward(tape, x)?;
        let y = blk.mlp.forward(tape, y)?;
        Ok(tape.add(x, y)?)
    }

    /// Hidden rows at token slot `slot` (0 latent, 1 action, 2 reward) of
    /// every step, as `[B·T, d]`.
    fn slot(&self, tape: &mut Tape, h: Var, b: usize, t: usize, slot: usize) -> Result<Var, WmError> {
        let d = self.config.embed_dim;
        let h = tape.reshape(h, &[b * t, 3, d])?;
        let s = tape.narrow(h, 1, slot, 1)?;
        Ok(tape.reshape(s, &[b * t, d])?)
    }

    /// `(ẑ, reward logits)`: row `b·T + t` of `ẑ` predicts `z_{t+1}` from
    /// the reward token of step `t`; the same row of the logits classifies
    /// the reward token of step `t` from its action token.
    pub fn forward_var(&self, tape: &mut Tape, batch: &StreamBatch) -> Result<(Var, Var), WmError> {
        let h = self.trunk(tape, batch)?;
        let (b, t) = (batch.batch, batch.steps);
        let hr = self.slot(tape, h, b, t, 2)?;
        let zhat = self.latent_head.forward(tape, hr)?;
        let ha = self.slot(tape, h, b, t, 1)?;
        let logits = self.reward_head.forward(tape, ha)?;
        Ok((zhat, logits))
    }

    /// `(total, l_mse, l_ce)` under teacher forcing. `l_mse` compares
    /// `ẑ_{t+1}` with `z_{t+1}` for `t < T-1`; `l_ce` covers all `T` reward
    /// tokens.
    pub fn loss_var(&self, tape: &mut Tape, batch: &StreamBatch) -> Result<(Var, Var, Var), WmError> {
        let (b, t, dz) = (batch.batch, batch.steps, self.config.latent_dim);
        if t < 2 {
            return Err(WmError::Stream("loss needs at least 2 steps".into()));
        }
        let (zhat, logits) = self.forward_var(tape, batch)?;
        let zhat = tape.reshape(zhat, &[b, t, dz])?;
        let pred = tape.narrow(zhat, 1, 0, t - 1)?;
        let mut target = Vec::with_capacity(b * (t - 1) * dz);
        for i in 0..b {
            let base = i * t * dz;
            target.extend_from_slice(&batch.latents[base + dz..base + t * dz]);
        }
        let target = tape.constant(Tensor::new(vec![b, t - 1, dz], target)?);
        let l_mse = tape.mse(pred, target)?;
        let l_ce = tape.cross_entropy(logits, &batch.reward_tokens, None, 0.0)?;
        let weighted = tape.scale(l_ce, self.config.reward_loss_weight);
        let total = tape.add(l_mse, weighted)?;
        Ok((total, l_mse, l_ce))
    }

    /// Plain-number `(total, l_mse, l_ce)`.
    pub fn loss(&self, batch: &StreamBatch) -> Result<(f64, f64, f64), WmError> {
        let mut tape = Tape::with_params(&self.params);
        let (t, m, c) = self.loss_var(&mut tape, batch)?;
        Ok((tape.value(t).item(), tape.value(m).item(), tape.value(c).item()))
    }

    /// Per-step `ẑ_{t+1}` (row-major `[T, d_z]`) and reward logits
    /// (`[T, 6]`) for one stream.
    pub fn forward(&self, stream: &TripletStream) -> Result<(Vec<f64>, Vec<f64>), WmError> {
        let batch = StreamBatch::from_streams(&[stream])?;
        let mut tape = Tape::with_params(&self.params);
        let (z, r) = self.forward_var(&mut tape, &batch)?;
        Ok((tape.value(z).data().to_vec(), tape.value(r).data().to_vec()))
    }

    /// Prediction of the latent following the last step of every stream,
    /// `[B, d_z]`. Only the final position goes through the head.
    pub fn predict_next(&self, batch: &StreamBatch) -> Result<Vec<f64>, WmError> {
        let mut tape = Tape::with_params(&self.params);
        let h = self.trunk(&mut tape, batch)?;
        let (b, n, d) = (batch.batch, 3 * batch.steps, self.config.embed_dim);
        let last = tape.narrow(h, 1, n - 1, 1)?;
        let last = tape.reshape(last, &[b, d])?;
        let z = self.latent_head.forward(&mut tape, last)?;
        Ok(tape.value(z).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_config() -> WmConfig {
        WmConfig {
            depth: 2,
            embed_dim: 8,
            heads: 2,
            context_steps: 4,
            latent_dim: 3,
            action_vocab: 5,
            reward_loss_weight: 0.5,
            ..WmConfig::default()
        }
    }

    fn random_stream(steps: usize, dz: usize, seed: u64) -> TripletStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = TripletStream::new(dz);
        for _ in 0..steps {
            let z: Vec<f64> = (0..dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
            s.push(&z, rng.gen_range(0..5), rng.gen_range(0..6));
        }
        s
    }

    #[test]
    fn zero_parameters_give_constant_prediction() {
        let mut m = WmModel::new(micro_config(), 0).unwrap();
        m.params.zero_all();
        let bias = m.latent_head.layers.last().unwrap().b;
        m.params.get_mut(bias).data_mut().copy_from_slice(&[0.3, -0.1, 0.7]);
        let (z, _) = m.forward(&random_stream(4, 3, 1)).unwrap();
        for row in z.chunks(3) {
            assert_eq!(row, &[0.3, -0.1, 0.7]);
        }
    }

    #[test]
    fn overlong_stream_is_rejected() {
        let m = WmModel::new(micro_config(), 0).unwrap();
        assert!(matches!(
            m.forward(&random_stream(5, 3, 1)),
            Err(WmError::ContextOverflow { steps: 5, max: 4 })
        ));
    }

    #[test]
    fn future_latent_does_not_leak() {
        let m = WmModel::new(micro_config(), 7).unwrap();
        let s = random_stream(4, 3, 2);
        let (z0, r0) = m.forward(&s).unwrap();
        let mut p = s.clone();
        p.latents[2 * 3] += 1.5; // z_2
        let (z1, r1) = m.forward(&p).unwrap();
        // ẑ_1, ẑ_2 (rows 0, 1) and reward logits of steps 0, 1 unchanged
        assert_eq!(&z0[..6], &z1[..6]);
        assert_eq!(&r0[..12], &r1[..12]);
        // reward head at step 2 sees z_2
        assert_ne!(&r0[12..18], &r1[12..18]);
    }

    #[test]
    fn loss_decomposes() {
        let m = WmModel::new(micro_config(), 3).unwrap();
        let s = random_stream(4, 3, 9);
        let b = StreamBatch::from_streams(&[&s, &s]).unwrap();
        let (t, mse, ce) = m.loss(&b).unwrap();
        assert!((t - mse - 0.5 * ce).abs() < 1e-15);
        let mut m0 = m.clone();
        m0.config.reward_loss_weight = 0.0;
        assert_eq!(m0.loss(&b).unwrap().0, mse);
    }

    #[test]
    fn predict_next_matches_full_forward() {
        let m = WmModel::new(micro_config(), 3).unwrap();
        let s = random_stream(3, 3, 4);
        let (z, _) = m.forward(&s).unwrap();
        let b = StreamBatch::from_streams(&[&s]).unwrap();
        let next = m.predict_next(&b).unwrap();
        assert_eq!(next, z[6..9].to_vec());
    }
}
