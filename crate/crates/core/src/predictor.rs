//! Standalone reward and termination classifiers.
//!
//! Each predictor looks at a fixed four-step window: the latents
//! `z_{t-3..=t}`, the clipped rewards `r_{t-4..=t-1}` and the action `a_t`,
//! and classifies either the clipped reward of step `t` or whether step `t`
//! terminates. Positions before the episode start are zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::nn::{Activation, Mlp};
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, TensorError, Var};
use crate::wm::EncodedDataset;

pub const WINDOW: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum PredictorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature window must hold {WINDOW} steps, got {0}")]
    Window(usize),
    #[error("empty training or validation set")]
    Empty,
    #[error("training diverged: loss {0}")]
    Diverged(f64),
    #[error("no label-smoothing candidates")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Reward,
    Termination,
}

impl PredictorKind {
    pub fn classes(self) -> usize {
        match self {
            PredictorKind::Reward => 3,
            PredictorKind::Termination => 2,
        }
    }

    /// Class whose precision drives selection: reward +1, or "terminated".
    pub fn positive_class(self) -> usize {
        match self {
            PredictorKind::Reward => 2,
            PredictorKind::Termination => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Reward => "reward",
            PredictorKind::Termination => "termination",
        }
    }
}

/// Sign clipping to {−1, 0, +1}.
pub fn clip_reward(raw: f64) -> i8 {
    crate::wm::reward_sign(raw)
}

/// Class index of a clipped reward: −1 → 0, 0 → 1, +1 → 2.
pub fn reward_class(raw: f64) -> usize {
    (clip_reward(raw) + 1) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub latent_dim: usize,
    pub action_vocab: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub smoothing_candidates: Vec<f64>,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            action_vocab: crate::env::global_vocab_size(),
            hidden: 64,
            lr: 1e-3,
            batch_size: 128,
            iters: 3000,
            smoothing_candidates: vec![0.01, 0.1, 0.2],
            seed: 0,
        }
    }
}

/// Inputs for one prediction. `latents` is `[WINDOW, d_z]` oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorInput {
    pub latents: Vec<f64>,
    pub rewards: [f64; WINDOW],
    pub action: usize,
}

impl PredictorInput {
    /// Window ending at transition `t` of `data`, zero-padded before the
    /// start of `t`'s episode.
    pub fn from_dataset(data: &EncodedDataset, t: usize) -> Self {
        let dz = data.latent_dim;
        let mut first = t;
        while first > 0 && !data.episode_start[first] {
            first -= 1;
            if t - first >= WINDOW {
                break;
            }
        }
        let mut latents = vec![0.0; WINDOW * dz];
        let mut rewards = [0.0; WINDOW];
        for k in 0..WINDOW {
            // latent slot k holds z_{t-3+k}; reward slot k holds r_{t-4+k}
            if let Some(i) = (t + k + 1).checked_sub(WINDOW) {
                if i >= first {
                    latents[k * dz..(k + 1) * dz].copy_from_slice(data.latent(i));
                }
            }
            if let Some(i) = (t + k).checked_sub(WINDOW) {
                if i >= first {
                    rewards[k] = clip_reward(data.rewards[i]) as f64;
                }
            }
        }
        Self {
            latents,
            rewards,
            action: data.actions[t],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub kind: PredictorKind,
    pub config: PredictorConfig,
    pub smoothing: f64,
    pub class_weights: Vec<f64>,
    pub params: ParamStore,
    latent_net: Mlp,
    action_net: Mlp,
    reward_net: Mlp,
    head: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision/recall/F1 of `positive`. Empty denominators give precision 1
/// and recall 1; F1 is 0 when both are 0.
pub fn precision_recall_f1(preds: &[usize], labels: &[usize], positive: usize) -> Prf {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fne == 0 { 1.0 } else { tp as f64 / (tp + fne) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// Inverse-frequency weights `N / (C·n_c)`; classes absent from `labels`
/// get weight 1.
pub fn class_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 {
                log::warn!("class {c} absent from training labels; using weight 1");
                1.0
            } else {
                labels.len() as f64 / (classes * n) as f64
            }
        })
        .collect()
}

/// Index of the winning candidate: highest precision, then highest recall,
/// then lowest smoothing.
pub fn select_candidate(candidates: &[(f64, Prf)]) -> Option<usize> {
    (0..candidates.len()).max_by(|&a, &b| {
        let (sa, pa) = candidates[a];
        let (sb, pb) = candidates[b];
        pa.precision
            .total_cmp(&pb.precision)
            .then(pa.recall.total_cmp(&pb.recall))
            .then(sb.total_cmp(&sa))
    })
}

impl Predictor {
    pub fn new(kind: PredictorKind, config: PredictorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, dz) = (config.hidden, config.latent_dim);
        let e = Activation::Elu;
        let latent_net = Mlp::new(&mut params, "pred.z", &[WINDOW * dz, h, h], e, &mut rng);
        let action_net = Mlp::new(&mut params, "pred.a", &[config.action_vocab, h, h], e, &mut rng);
        let reward_net = Mlp::new(&mut params, "pred.r", &[WINDOW, h, h], e, &mut rng);
        let head = Mlp::new(&mut params, "pred.head", &[3 * h, h, kind.classes()], e, &mut rng);
        Self {
            kind,
            config,
            smoothing: 0.0,
            class_weights: vec![1.0; kind.classes()],
            params,
            latent_net,
            action_net,
            reward_net,
            head,
        }
    }

    fn check(&self, inputs: &[PredictorInput]) -> Result<(), PredictorError> {
        let want = WINDOW * self.config.latent_dim;
        for x in inputs {
            if x.latents.len() != want {
                return Err(PredictorError::Window(x.latents.len() / self.config.latent_dim.max(1)));
            }
        }
        if inputs.is_empty() {
            return Err(PredictorError::Empty);
        }
        Ok(())
    }

    /// Concatenated stream encodings `[B, 3·hidden]`.
    pub fn features_var(&self, tape: &mut Tape, inputs: &[PredictorInput]) -> Result<Var, PredictorError> {
        self.check(inputs)?;
        let b = inputs.len();
        let dz = self.config.latent_dim;
        let v = self.config.action_vocab;
        let z: Vec<f64> = inputs.iter().flat_map(|x| x.latents.iter().copied()).collect();
        let mut a = vec![0.0; b * v];
        for (i, x) in inputs.iter().enumerate() {
            a[i * v + x.action.min(v - 1)] = 1.0;
        }
        let r: Vec<f64> = inputs.iter().flat_map(|x| x.rewards).collect();
        let z = tape.constant(Tensor::new(vec![b, WINDOW * dz], z)?);
        let a = tape.constant(Tensor::new(vec![b, v], a)?);
        let r = tape.constant(Tensor::new(vec![b, WINDOW], r)?);
        let fz = self.latent_net.forward(tape, z)?;
        let fa = self.action_net.forward(tape, a)?;
        let fr = self.reward_net.forward(tape, r)?;
        Ok(tape.concat(&[fz, fa, fr], 1)?)
    }

    /// Feature vector for a single input.
    pub fn build_features(&self, input: &PredictorInput) -> Result<Vec<f64>, PredictorError> {
        let mut tape = Tape::with_params(&self.params);
        let f = self.features_var(&mut tape, std::slice::from_ref(input))?;
        Ok(tape.value(f).data().to_vec())
    }

    pub fn logits_var(&self, tape: &mut Tape, inputs: &[PredictorInput]) -> Result<Var, PredictorError> {
        let f = self.features_var(tape, inputs)?;
        let f = tape.elu(f);
        Ok(self.head.forward(tape, f)?)
    }

    /// Argmax class per input.
    pub fn predict(&self, inputs: &[PredictorInput]) -> Result<Vec<usize>, PredictorError> {
        let mut tape = Tape::with_params(&self.params);
        let l = self.logits_var(&mut tape, inputs)?;
        let c = self.kind.classes();
        Ok(tape
            .value(l)
            .data()
            .chunks(c)
            .map(|row| {
                (0..c)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap()
            })
            .collect())
    }

    pub fn loss(&self, inputs: &[PredictorInput], labels: &[usize]) -> Result<f64, PredictorError> {
        let mut tape = Tape::with_params(&self.params);
        let l = self.logits_var(&mut tape, inputs)?;
        let loss = tape.cross_entropy(l, labels, Some(&self.class_weights), self.smoothing)?;
        Ok(tape.value(loss).item())
    }

    pub fn evaluate(&self, inputs: &[PredictorInput], labels: &[usize]) -> Result<Prf, PredictorError> {
        let mut preds = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(512) {
            preds.extend(self.predict(chunk)?);
        }
        Ok(precision_recall_f1(&preds, labels, self.kind.positive_class()))
    }
}

/// Labelled examples for `kind` from transitions `range` of `data`.
pub fn examples(
    data: &EncodedDataset,
    range: std::ops::Range<usize>,
    kind: PredictorKind,
) -> (Vec<PredictorInput>, Vec<usize>) {
    range
        .map(|t| {
            let label = match kind {
                PredictorKind::Reward => reward_class(data.rewards[t]),
                PredictorKind::Termination => data.terminated[t] as usize,
            };
            (PredictorInput::from_dataset(data, t), label)
        })
        .unzip()
}

/// Outcome of one smoothing candidate on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub smoothing: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Trains one model per smoothing candidate with inverse-frequency class
/// weights and returns the candidate selected by [`select_candidate`].
pub fn train_predictor(
    kind: PredictorKind,
    train: (&[PredictorInput], &[usize]),
    val: (&[PredictorInput], &[usize]),
    config: &PredictorConfig,
) -> Result<(Predictor, Vec<CandidateReport>), PredictorError> {
    let (xs, ys) = train;
    if xs.is_empty() || val.0.is_empty() {
        return Err(PredictorError::Empty);
    }
    if config.smoothing_candidates.is_empty() {
        return Err(PredictorError::NoCandidates);
    }
    let weights = class_weights(ys, kind.classes());
    let mut models = Vec::new();
    let mut scored = Vec::new();
    for &smoothing in &config.smoothing_candidates {
        let mut model = Predictor::new(kind, config.clone(), config.seed);
        model.smoothing = smoothing;
        model.class_weights = weights.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: 0.0,
                grad_clip: Some(1.0),
                ..AdamWConfig::default()
            },
            &model.params,
        );
        let bs = config.batch_size.min(xs.len());
        for _ in 0..config.iters {
            let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..xs.len())).collect();
            let bx: Vec<PredictorInput> = idx.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
            let (loss, grads) = {
                let mut tape = Tape::with_params(&model.params);
                let l = model.logits_var(&mut tape, &bx)?;
                let loss = tape.cross_entropy(l, &by, Some(&model.class_weights), smoothing)?;
                tape.backward(loss)?;
                (tape.value(loss).item(), tape.param_grads())
            };
            if !loss.is_finite() {
                return Err(PredictorError::Diverged(loss));
            }
            opt.step(&mut model.params, &grads)?;
        }
        let prf = model.evaluate(val.0, val.1)?;
        log::debug!("{} predictor smoothing {smoothing}: {prf:?}", kind.name());
        scored.push((smoothing, prf));
        models.push(model);
    }
    let best = select_candidate(&scored).ok_or(PredictorError::NoCandidates)?;
    let reports = scored
        .iter()
        .map(|&(smoothing, p)| CandidateReport {
            smoothing,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
        })
        .collect();
    Ok((models.swap_remove(best), reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prf(p: f64, r: f64) -> Prf {
        Prf {
            precision: p,
            recall: r,
            f1: 0.0,
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_reward(3.0), 1);
        assert_eq!(clip_reward(0.0), 0);
        assert_eq!(clip_reward(-0.5), -1);
    }

    #[test]
    fn prf_examples() {
        let p = precision_recall_f1(&[1, 0, 1], &[1, 0, 1], 1);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        // TP 2, FP 1, FN 0
        let p = precision_recall_f1(&[1, 1, 1, 0], &[1, 1, 0, 0], 1);
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.recall, 1.0);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        let p = precision_recall_f1(&[0, 0], &[0, 0], 1);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_positive_labels_convention() {
        assert_eq!(precision_recall_f1(&[1, 0], &[0, 0], 1).precision, 0.0);
        assert_eq!(precision_recall_f1(&[0, 0], &[0, 0], 1).precision, 1.0);
    }

    #[test]
    fn zero_precision_and_recall_give_zero_f1() {
        let p = precision_recall_f1(&[1, 0], &[0, 1], 1);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn selection_tie_breaks() {
        let c = [(0.01, prf(0.6, 0.9)), (0.1, prf(0.9, 0.5)), (0.2, prf(0.9, 0.7))];
        assert_eq!(select_candidate(&c), Some(2));
        let c = [(0.01, prf(0.9, 0.7)), (0.1, prf(0.9, 0.7)), (0.2, prf(0.9, 0.7))];
        assert_eq!(select_candidate(&c), Some(0));
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let w = class_weights(&[0, 0, 0, 1], 2);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert_eq!(class_weights(&[1, 1], 3), vec![1.0, 1.0 / 3.0, 1.0]);
    }

    fn tiny_data() -> EncodedDataset {
        EncodedDataset {
            env_name: "t".into(),
            latent_dim: 2,
            latents: (0..12).map(|i| i as f64).collect(),
            actions: vec![0, 1, 2, 3, 4, 0],
            rewards: vec![1.0, 0.0, -2.0, 0.0, 1.0, 0.0],
            terminated: vec![false, false, true, false, false, true],
            episode_start: vec![true, false, false, true, false, false],
        }
    }

    #[test]
    fn window_pads_before_episode_start() {
        let d = tiny_data();
        let x = PredictorInput::from_dataset(&d, 4);
        // episode starts at 3: z_{1..2} zero, z_3, z_4 present; r_3 present
        assert_eq!(&x.latents[..4], &[0.0; 4]);
        assert_eq!(&x.latents[4..], &[6.0, 7.0, 8.0, 9.0]);
        assert_eq!(x.rewards, [0.0, 0.0, 0.0, 0.0]);
        let x = PredictorInput::from_dataset(&d, 2);
        assert_eq!(x.rewards, [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(x.action, 2);
    }

    #[test]
    fn features_are_deterministic_and_order_sensitive() {
        let p = Predictor::new(PredictorKind::Reward, PredictorConfig { latent_dim: 2, hidden: 8, ..PredictorConfig::default() }, 1);
        let x = PredictorInput {
            latents: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            rewards: [0.0, 1.0, 0.0, 0.0],
            action: 2,
        };
        assert_eq!(p.build_features(&x).unwrap(), p.build_features(&x).unwrap());
        let mut y = x.clone();
        y.latents = vec![0.7, 0.8, 0.5, 0.6, 0.3, 0.4, 0.1, 0.2];
        assert_ne!(p.build_features(&x).unwrap(), p.build_features(&y).unwrap());
        let bad = PredictorInput { latents: vec![0.0; 6], ..x };
        assert!(matches!(p.build_features(&bad), Err(PredictorError::Window(3))));
    }

    #[test]
    fn zero_input_features_come_from_biases() {
        let p = Predictor::new(PredictorKind::Termination, PredictorConfig { latent_dim: 2, hidden: 4, ..PredictorConfig::default() }, 1);
        let x = PredictorInput {
            latents: vec![0.0; 8],
            rewards: [0.0; 4],
            action: 0,
        };
        let f = p.build_features(&x).unwrap();
        // zero input: first layer emits its bias, so the stream output is
        // elu(b1)·W2 + b2
        let bias_path = |net: &Mlp| -> Vec<f64> {
            let (l1, l2) = (&net.layers[0], &net.layers[1]);
            let h: Vec<f64> = p.params.get(l1.b).data().iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect();
            let w = p.params.get(l2.w).data();
            (0..l2.out_dim)
                .map(|j| p.params.get(l2.b).data()[j] + (0..l2.in_dim).map(|i| h[i] * w[i * l2.out_dim + j]).sum::<f64>())
                .collect()
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&f[..4], &bias_path(&p.latent_net)));
        assert!(close(&f[8..], &bias_path(&p.reward_net)));
    }

    #[test]
    fn memorizes_micro_dataset() {
        let cfg = PredictorConfig {
            latent_dim: 2,
            hidden: 16,
            iters: 300,
            batch_size: 8,
            lr: 1e-2,
            ..PredictorConfig::default()
        };
        let xs: Vec<PredictorInput> = (0..8)
            .map(|i| PredictorInput {
                latents: (0..8).map(|k| ((i * 8 + k) as f64 * 0.37).sin()).collect(),
                rewards: [0.0; 4],
                action: i % 5,
            })
            .collect();
        let ys = vec![1, 2, 1, 1, 2, 1, 0, 1];
        let (model, reports) = train_predictor(PredictorKind::Reward, (&xs, &ys), (&xs, &ys), &cfg).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(model.evaluate(&xs, &ys).unwrap().precision, 1.0);
    }
}
