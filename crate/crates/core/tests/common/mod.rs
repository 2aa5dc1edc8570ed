//! Oracles shared by the integration targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmlab::ppo::{ppo_loss_var, ActorCritic, Minibatch, PolicyConfig, PpoConfig};
use wmlab::tensor::{ParamStore, Tape, Tensor, Var};
use wmlab::vae::{Vae, VaeConfig};
use wmlab::wm::{StreamBatch, TripletStream, WmConfig, WmModel, REWARD_TOKENS};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error over all leaf inputs of a scalar-valued graph.
pub fn leaf_gradient_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
        .collect();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Relative error of parameter gradients of `loss(store)` against central
/// differences on every parameter scalar.
pub fn param_gradient_error(
    store: &ParamStore,
    analytic: &[f64],
    loss: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let base = store.flatten();
    let mut probe = store.clone();
    let mut numeric = vec![0.0; base.len()];
    for j in 0..base.len() {
        let mut x = base.clone();
        x[j] += FD_STEP;
        probe.unflatten(&x).unwrap();
        let up = loss(&probe);
        x[j] -= 2.0 * FD_STEP;
        probe.unflatten(&x).unwrap();
        let down = loss(&probe);
        numeric[j] = (up - down) / (2.0 * FD_STEP);
    }
    relative_error(analytic, &numeric)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Uniform tensor whose entries stay at least `gap` away from every kink.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn micro_vae(seed: u64) -> Vae {
    Vae::new(
        VaeConfig {
            obs_dim: 12,
            hidden: 6,
            latent_dim: 3,
            kl_scale: 0.5,
        },
        seed,
    )
}

pub fn micro_wm_config() -> WmConfig {
    WmConfig {
        depth: 2,
        embed_dim: 8,
        heads: 2,
        context_steps: 3,
        reward_loss_weight: 0.3,
        latent_dim: 3,
        action_vocab: 5,
        ..WmConfig::default()
    }
}

pub fn random_stream(rng: &mut ChaCha8Rng, cfg: &WmConfig, steps: usize) -> TripletStream {
    let mut s = TripletStream::new(cfg.latent_dim);
    for _ in 0..steps {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.push(&z, rng.gen_range(0..cfg.action_vocab), rng.gen_range(0..REWARD_TOKENS));
    }
    s
}

pub fn random_stream_batch(rng: &mut ChaCha8Rng, cfg: &WmConfig, batch: usize) -> StreamBatch {
    let streams: Vec<TripletStream> = (0..batch).map(|_| random_stream(rng, cfg, cfg.context_steps)).collect();
    let refs: Vec<&TripletStream> = streams.iter().collect();
    StreamBatch::from_streams(&refs).unwrap()
}

pub fn micro_policy(seed: u64) -> ActorCritic {
    ActorCritic::new(
        PolicyConfig {
            frame_dim: 5,
            frame_stack: 2,
            hidden: vec![6, 6],
            actions: 3,
        },
        seed,
    )
    .unwrap()
}

/// A minibatch whose ratios, value deltas and KL sit clear of every
/// branch point of the clipped loss, so central differences stay on one
/// smooth piece.
pub fn micro_minibatch(rng: &mut ChaCha8Rng, policy: &ActorCritic, cfg: &PpoConfig, n: usize) -> Minibatch {
    loop {
        let d = policy.config.input_dim();
        let observations: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (logp, values) = policy.evaluate(&observations).unwrap();
        let a = policy.config.actions;
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a)).collect();
        let cur: Vec<f64> = actions.iter().enumerate().map(|(i, &k)| logp[i * a + k]).collect();
        let old_log_probs: Vec<f64> = cur.iter().map(|l| l - rng.gen_range(-0.4..0.4)).collect();
        let old_values: Vec<f64> = values.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        let returns: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = cfg.surrogate_clip;
        let kink = |x: f64, k: f64| (x - k).abs() < 1e-3;
        let ratio_ok = cur
            .iter()
            .zip(&old_log_probs)
            .all(|(c, o)| !kink((c - o).exp(), 1.0 - eps) && !kink((c - o).exp(), 1.0 + eps));
        let value_ok = values.iter().zip(&old_values).zip(&returns).all(|((v, o), r)| {
            let dv = v - o;
            let vc = o + dv.clamp(-cfg.value_clip, cfg.value_clip);
            !kink(dv, cfg.value_clip) && !kink(dv, -cfg.value_clip) && !kink((v - r).powi(2), (vc - r).powi(2))
        });
        let kl = old_log_probs.iter().zip(&cur).map(|(o, c)| o - c).sum::<f64>() / n as f64;
        if ratio_ok && value_ok && !kink(kl, cfg.target_kl) {
            return Minibatch {
                observations,
                actions,
                old_log_probs,
                old_values,
                advantages,
                returns,
            };
        }
    }
}

/// Brute-force generalized advantages: `Σ_l (γλ)^l δ_{t+l}`, truncated at
/// the first done.
pub fn gae_oracle(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    envs: usize,
    horizon: usize,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; envs * horizon];
    for b in 0..envs {
        let v = |t: usize| values[b * (horizon + 1) + t];
        let i = |t: usize| b * horizon + t;
        let delta = |t: usize| {
            let live = if dones[i(t)] { 0.0 } else { 1.0 };
            rewards[i(t)] + gamma * live * v(t + 1) - v(t)
        };
        for t in 0..horizon {
            let mut acc = 0.0;
            for l in 0..horizon - t {
                acc += (gamma * lambda).powi(l as i32) * delta(t + l);
                if dones[i(t + l)] {
                    break;
                }
            }
            out[i(t)] = acc;
        }
    }
    out
}

/// Mean of `trim`-trimmed trailing windows by sorting and slicing.
pub fn trimmed_oracle(series: &[f64], trim: f64, window: usize) -> Vec<f64> {
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let mut w = series[lo..=i].to_vec();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (trim * w.len() as f64).floor() as usize;
            let kept = &w[k..w.len() - k];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

/// A run small enough to finish every stage in seconds.
pub fn tiny_run_config() -> wmlab::store::RunConfig {
    let mut cfg = wmlab::store::RunConfig::default();
    cfg.grid_size = 8;
    cfg.expert = PpoConfig {
        horizon: 16,
        envs: 4,
        minibatch_iters: 4,
        max_iters: 3,
        hidden: vec![16],
        ..PpoConfig::default()
    };
    cfg.collect.budget = 600;
    cfg.vae.model.hidden = 16;
    cfg.vae.model.latent_dim = 4;
    cfg.vae.model.obs_dim = 64;
    cfg.vae.train.max_iters = 20;
    cfg.vae.train.eval_interval = 10;
    cfg.wm.model = WmConfig {
        depth: 1,
        embed_dim: 8,
        heads: 2,
        context_steps: 4,
        latent_dim: 4,
        ..WmConfig::default()
    };
    cfg.wm.train.max_iters = 10;
    cfg.wm.train.eval_interval = 5;
    cfg.wm.train.val_windows = 8;
    cfg.predictor.latent_dim = 4;
    cfg.predictor.hidden = 8;
    cfg.predictor.iters = 10;
    cfg.dream.ppo = cfg.expert.clone();
    cfg.dream.ppo.max_iters = 2;
    cfg.dream.horizon = 8;
    cfg.eval.episodes = 2;
    cfg.sweep.depths = vec![1, 2];
    cfg.sweep.seeds = 2;
    cfg.sweep.train = cfg.wm.train.clone();
    cfg
}

pub type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
pub type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// A differentiable primitive wrapped into a scalar-valued graph.
pub struct GradCase {
    pub name: &'static str,
    pub make: Maker,
    pub graph: Graph,
}

pub const GRAD_INSTANCES: u64 = 20;

/// Worst relative error of one case over [`GRAD_INSTANCES`] seeds.
pub fn worst_case_error(case: &GradCase) -> f64 {
    (0..GRAD_INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.make)(&mut rng);
            leaf_gradient_error(&inputs, &*case.graph)
        })
        .fold(0.0, f64::max)
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    graph: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> GradCase {
    GradCase {
        name,
        make: Box::new(make),
        graph: Box::new(graph),
    }
}

/// Contracts an arbitrary output with fixed random weights so every
/// output entry reaches the loss.
fn project(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + 7);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), w).unwrap());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn unary(name: &'static str, lo: f64, hi: f64, kinks: &'static [f64], op: fn(&mut Tape, Var) -> Var) -> GradCase {
    case(
        name,
        move |r| vec![away_from(r, &[3, 4], lo, hi, kinks, 1e-3)],
        move |t, v| {
            let y = op(t, v[0]);
            project(t, y)
        },
    )
}

fn two(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(r, &[2, 5], 1.0), randn(r, &[2, 5], 1.0)]
}

/// Operands kept apart so min/max never sit on a tie.
fn apart(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let a = randn(r, &[2, 5], 1.0);
    let b: Vec<f64> = a
        .data()
        .iter()
        .map(|x| x + if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(0.01..1.0))
        .collect();
    vec![a, Tensor::new(vec![2, 5], b).unwrap()]
}

fn cube(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(r, &[2, 3, 4], 1.0)]
}

fn mat(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![randn(r, &[3, 4], 1.0)]
}

/// Every differentiable tape primitive.
pub fn primitive_cases() -> Vec<GradCase> {
    let mut cases = vec![
        unary("exp", -2.0, 2.0, &[], |t, x| t.exp(x)),
        unary("log", 0.1, 3.0, &[], |t, x| t.log(x)),
        unary("square", -2.0, 2.0, &[], |t, x| t.square(x)),
        unary("sigmoid", -4.0, 4.0, &[], |t, x| t.sigmoid(x)),
        unary("tanh", -3.0, 3.0, &[], |t, x| t.tanh(x)),
        unary("gelu", -3.0, 3.0, &[], |t, x| t.gelu(x)),
        unary("elu", -3.0, 3.0, &[0.0], |t, x| t.elu(x)),
        unary("clamp", -2.0, 2.0, &[-0.5, 0.7], |t, x| t.clamp(x, -0.5, 0.7)),
        unary("scale", -2.0, 2.0, &[], |t, x| t.scale(x, -1.7)),
        unary("add_scalar", -2.0, 2.0, &[], |t, x| t.add_scalar(x, 0.3)),
        case("add", two, |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y)
        }),
        case("sub", two, |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            project(t, y)
        }),
        case("mul", two, |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y)
        }),
        case("minimum", apart, |t, v| {
            let y = t.minimum(v[0], v[1]).unwrap();
            project(t, y)
        }),
        case("maximum", apart, |t, v| {
            let y = t.maximum(v[0], v[1]).unwrap();
            project(t, y)
        }),
        case(
            "add_broadcast",
            |r| vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[3, 4], 1.0)],
            |t, v| {
                let y = t.add_broadcast(v[0], v[1]).unwrap();
                project(t, y)
            },
        ),
        case(
            "matmul",
            |r| vec![randn(r, &[3, 4], 1.0), randn(r, &[4, 2], 1.0)],
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                project(t, y)
            },
        ),
        case(
            "bmm",
            |r| vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 4, 5], 1.0)],
            |t, v| {
                let y = t.bmm(v[0], v[1], false).unwrap();
                project(t, y)
            },
        ),
        case(
            "bmm transposed",
            |r| vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 5, 4], 1.0)],
            |t, v| {
                let y = t.bmm(v[0], v[1], true).unwrap();
                project(t, y)
            },
        ),
        case(
            "log_softmax",
            |r| vec![randn(r, &[3, 5], 1.5)],
            |t, v| {
                let y = t.log_softmax(v[0]);
                project(t, y)
            },
        ),
        case(
            "layernorm",
            |r| vec![randn(r, &[3, 6], 1.0), randn(r, &[6], 1.0), randn(r, &[6], 1.0)],
            |t, v| {
                let y = t.layernorm(v[0], v[1], v[2], 1e-5).unwrap();
                project(t, y)
            },
        ),
        case("reshape", cube, |t, v| {
            let y = t.reshape(v[0], &[6, 4]).unwrap();
            project(t, y)
        }),
        case("permute", cube, |t, v| {
            let y = t.permute(v[0], &[2, 0, 1]).unwrap();
            project(t, y)
        }),
        case(
            "concat",
            |r| vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[2, 1, 4], 1.0)],
            |t, v| {
                let y = t.concat(&[v[0], v[1]], 1).unwrap();
                project(t, y)
            },
        ),
        case("narrow", cube, |t, v| {
            let y = t.narrow(v[0], 2, 1, 2).unwrap();
            project(t, y)
        }),
        case("index_select", cube, |t, v| {
            let y = t.index_select(v[0], 1, &[2, 0, 2]).unwrap();
            project(t, y)
        }),
        case(
            "gather_last",
            |r| vec![randn(r, &[4, 3], 1.0)],
            |t, v| {
                let y = t.gather_last(v[0], &[2, 0, 1, 2]).unwrap();
                project(t, y)
            },
        ),
        case(
            "mask_future",
            |r| vec![randn(r, &[2, 3, 3], 1.0)],
            |t, v| {
                let y = t.mask_future(v[0]).unwrap();
                let y = t.softmax(y, 2).unwrap();
                project(t, y)
            },
        ),
        case("sum", mat, |t, v| {
            let s = t.square(v[0]);
            t.sum(s)
        }),
        case("mean", mat, |t, v| {
            let s = t.square(v[0]);
            t.mean(s)
        }),
        case("sum_last", mat, |t, v| {
            let y = t.sum_last(v[0]);
            project(t, y)
        }),
        case(
            "mse",
            |r| vec![randn(r, &[3, 4], 1.0), randn(r, &[3, 4], 1.0)],
            |t, v| t.mse(v[0], v[1]).unwrap(),
        ),
        case(
            "cross_entropy",
            |r| vec![randn(r, &[5, 4], 1.5)],
            |t, v| t.cross_entropy(v[0], &[0, 3, 1, 3, 2], None, 0.0).unwrap(),
        ),
        case(
            "weighted smoothed cross_entropy",
            |r| vec![randn(r, &[5, 4], 1.5)],
            |t, v| {
                t.cross_entropy(v[0], &[0, 3, 1, 3, 2], Some(&[0.5, 2.0, 1.0, 3.0]), 0.1)
                    .unwrap()
            },
        ),
    ];
    for (axis, name) in ["softmax axis 0", "softmax axis 1", "softmax axis 2"].into_iter().enumerate() {
        cases.push(case(
            name,
            |r| vec![randn(r, &[2, 3, 4], 1.5)],
            move |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                project(t, y)
            },
        ));
    }
    cases
}

pub fn vae_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut vae = micro_vae(seed);
    // move the encoder head off its zero init
    let perturbed: Vec<f64> = vae.params.flatten().iter().map(|x| x + rng.gen_range(-0.2..0.2)).collect();
    vae.params.unflatten(&perturbed).unwrap();
    let pixels: Vec<f64> = (0..4 * 12).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noise: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::with_params(&vae.params);
    let p = tape.constant(Tensor::new(vec![4, 12], pixels.clone()).unwrap());
    let e = tape.constant(Tensor::new(vec![4, 3], noise.clone()).unwrap());
    let (total, _, _) = vae.loss_var(&mut tape, p, e).unwrap();
    tape.backward(total).unwrap();
    let analytic = tape.param_grads().flatten(&vae.params);
    param_gradient_error(&vae.params, &analytic, &|store| {
        let mut m = vae.clone();
        m.params = store.clone();
        m.loss(&pixels, &noise).unwrap().total
    })
}

pub fn wm_gradient_error(seed: u64) -> f64 {
    let cfg = micro_wm_config();
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let wm = WmModel::new(cfg.clone(), seed).unwrap();
    let batch = random_stream_batch(&mut rng, &cfg, 2);
    let mut tape = Tape::with_params(&wm.params);
    let (total, _, _) = wm.loss_var(&mut tape, &batch).unwrap();
    tape.backward(total).unwrap();
    let analytic = tape.param_grads().flatten(&wm.params);
    param_gradient_error(&wm.params, &analytic, &|store| {
        let mut m = wm.clone();
        m.params = store.clone();
        m.loss(&batch).unwrap().0
    })
}

pub fn ppo_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let mut policy = micro_policy(seed);
    let perturbed: Vec<f64> = policy.params.flatten().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
    policy.params.unflatten(&perturbed).unwrap();
    // a low target makes half the instances exercise the KL penalty
    let cfg = PpoConfig {
        target_kl: if seed % 2 == 0 { 0.01 } else { 10.0 },
        ..PpoConfig::default()
    };
    let mb = micro_minibatch(&mut rng, &policy, &cfg, 6);
    let loss = |p: &ActorCritic| {
        let mut tape = Tape::with_params(&p.params);
        let (total, _) = ppo_loss_var(p, &mut tape, &mb, &cfg).unwrap();
        tape.backward(total).unwrap();
        (tape.value(total).item(), tape.param_grads().flatten(&p.params))
    };
    let analytic = loss(&policy).1;
    param_gradient_error(&policy.params, &analytic, &|store| {
        let mut p = policy.clone();
        p.params = store.clone();
        loss(&p).0
    })
}
