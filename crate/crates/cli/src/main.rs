use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wmlab::env::{Env, EnvSpec};
use wmlab::ppo::{
    collect_offline, evaluate_policy, normalized_score, random_policy_returns, sample_categorical, train_expert,
    train_in_imagination, ActorCritic, DreamRunConfig, FrameView,
};
use wmlab::predictor::{examples, train_predictor, Predictor, PredictorKind};
use wmlab::store::{
    load_checkpoint, load_dataset, loss_vs_depth_svg, loss_vs_iteration_svg, read_json, run_pipeline, save_checkpoint,
    save_dataset, series_csv, split_dataset, CheckpointMeta, DatasetSplit, RunConfig, SweepSummary, TrajectoryDataset,
    ROOT_ENV,
};
use wmlab::sweep::{budget_mix_experiment, classify_regime, run_depth_sweep, LossCurve, SweepResult};
use wmlab::vae::{train_vae, Vae};
use wmlab::wm::{imagine, sample_seed, train_wm, EncodedDataset, EnvWindows, WmConfig, WmModel};

#[derive(Parser)]
#[command(name = "wmlab", version, about = "Desk-scale world-model laboratory")]
struct Cli {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a PPO expert directly in an environment.
    TrainExpert {
        #[arg(long)]
        env: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect an offline dataset with the decaying random-action schedule.
    Collect {
        #[arg(long)]
        env: String,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared VAE on one or more datasets.
    TrainVae {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dynamics model on encoded datasets.
    TrainWm {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        depth: Option<usize>,
        /// Train one model on all datasets.
        #[arg(long)]
        unified: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train reward and termination predictors.
    TrainPredictors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy purely inside the world model.
    TrainDreamPolicy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        wm: PathBuf,
        #[arg(long)]
        predictors: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy in the real environment.
    EvalPolicy {
        #[arg(long)]
        env: String,
        #[arg(long)]
        policy: PathBuf,
        /// Show the policy VAE reconstructions, as seen in imagination.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Expert checkpoint for a normalized score.
        #[arg(long)]
        expert: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Depth sweep of world models.
    Sweep {
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        /// Comma-separated depths; defaults to the configuration.
        #[arg(long, value_delimiter = ',')]
        depth: Vec<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        unified: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-budget mixture of two environments.
    Mix {
        #[arg(long = "data", num_args = 2, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        total: usize,
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        #[arg(long, value_delimiter = ',')]
        depth: Vec<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a scaling regime from best losses per depth.
    Classify {
        /// Sweep JSON produced by `sweep`.
        #[arg(long, conflicts_with = "values")]
        sweep: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        stderr: Vec<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Render plots, CSV series and regime labels from sweep results.
    Report {
        #[arg(long = "sweep", required = true)]
        sweeps: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump an imagined rollout as PGM frames.
    Imagine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        wm: PathBuf,
        #[arg(long)]
        predictors: PathBuf,
        /// Acting policy; uniform random when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage with caching under the artifact root.
    Pipeline {
        /// Artifact root; defaults to $WMLAB_ROOT or ./wmlab-runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump real environment frames under random actions as PGM.
    Render {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    run(cli.command, cfg)
}

fn spec_named(cfg: &RunConfig, name: &str) -> Result<EnvSpec> {
    let base = EnvSpec::by_name(name)?;
    Ok(EnvSpec::new(base.kind, cfg.grid_size)?)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn meta(cfg: &RunConfig, curve: Option<&LossCurve>) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        config_hash: wmlab::store::content_hash(cfg),
        iteration: curve.map_or(0, |c| c.best_iter),
        best_metric: curve.map(|c| c.best_val),
    }
}

fn curve_csv(c: &LossCurve) -> String {
    let mut cols = vec![
        ("iteration", c.iterations.iter().map(|&i| i as f64).collect()),
        ("train_loss", c.train_loss.clone()),
        ("val_loss", c.val_loss.clone()),
    ];
    let names: Vec<String> = c.per_env_val.keys().map(|k| format!("val_{k}")).collect();
    for (name, series) in names.iter().zip(c.per_env_val.values()) {
        cols.push((name.as_str(), series.clone()));
    }
    series_csv(&cols)
}

/// A dataset with its environment, split and latent encoding.
struct Loaded {
    spec: EnvSpec,
    dataset: TrajectoryDataset,
    split: DatasetSplit,
    encoded: EncodedDataset,
}

fn load_encoded(cfg: &RunConfig, path: &Path, vae: &Vae) -> Result<Loaded> {
    let dataset = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    let base = EnvSpec::by_name(&dataset.env_name)?;
    let spec = EnvSpec::new(base.kind, dataset.grid_size)?;
    let split = split_dataset(&dataset, cfg.collect.val_fraction)?;
    let encoded = dataset.encode(vae, &spec)?;
    Ok(Loaded {
        spec,
        dataset,
        split,
        encoded,
    })
}

fn load_vae(path: &Path) -> Result<Vae> {
    Ok(load_checkpoint::<Vae>(path).with_context(|| format!("loading VAE {}", path.display()))?.0)
}

fn load_predictors(dir: &Path) -> Result<(Predictor, Predictor)> {
    let (r, _) = load_checkpoint::<Predictor>(&dir.join("reward.ckpt")).context("loading reward predictor")?;
    let (t, _) = load_checkpoint::<Predictor>(&dir.join("termination.ckpt")).context("loading termination predictor")?;
    Ok((r, t))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write_sweep(out: &Path, label: &str, r: &SweepResult, cfg: &RunConfig) -> Result<()> {
    mkdir(out)?;
    write(&out.join("sweep.json"), serde_json::to_vec_pretty(r)?)?;
    write(&out.join("loss_vs_depth.svg"), loss_vs_depth_svg(label, r))?;
    write(
        &out.join("loss_vs_iteration.svg"),
        loss_vs_iteration_svg(label, r, cfg.sweep.filter_trim, cfg.sweep.filter_window),
    )?;
    let depth = r.depths.iter().map(|&d| d as f64).collect();
    write(
        &out.join("depths.csv"),
        series_csv(&[("depth", depth), ("mean_best", r.best_vals()), ("std_error", r.std_errors())]),
    )?;
    match r.env_regimes(cfg.sweep.sat_threshold) {
        Ok(labels) => {
            for (env, label) in labels {
                println!("{env}: {label}");
            }
        }
        Err(e) => println!("regime: unavailable ({e})"),
    }
    Ok(())
}

fn run(command: Command, cfg: RunConfig) -> Result<()> {
    match command {
        Command::TrainExpert { env, out } => {
            let spec = spec_named(&cfg, &env)?;
            mkdir(&out)?;
            let (policy, curve) = train_expert(&spec, &cfg.expert, cfg.seed)?;
            save_checkpoint(&policy, &meta(&cfg, None), &out.join("policy.ckpt"))?;
            let running = curve.running_return.iter().map(|r| r.unwrap_or(f64::NAN)).collect();
            write(
                &out.join("returns.csv"),
                series_csv(&[
                    ("iteration", curve.iterations.iter().map(|&i| i as f64).collect()),
                    ("env_steps", curve.env_steps.iter().map(|&i| i as f64).collect()),
                    ("running_return", running),
                ]),
            )?;
            println!("best running return {:?} at iteration {:?}", curve.best_running, curve.best_iter);
        }
        Command::Collect {
            env,
            expert,
            budget,
            out,
        } => {
            let spec = spec_named(&cfg, &env)?;
            let (policy, _) = load_checkpoint::<ActorCritic>(&expert)?;
            let c = collect_offline(&spec, &policy, budget.unwrap_or(cfg.collect.budget), cfg.seed)?;
            save_dataset(&c.dataset, &out)?;
            println!(
                "{} transitions, {} episodes, {} random actions",
                c.dataset.len(),
                c.dataset.episode_count(),
                c.random_action.iter().filter(|&&r| r).count()
            );
        }
        Command::TrainVae { data, out } => {
            mkdir(&out)?;
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for p in &data {
                let ds = load_dataset(p).with_context(|| format!("loading {}", p.display()))?;
                let s = split_dataset(&ds, cfg.collect.val_fraction)?;
                train.extend_from_slice(ds.frames_in(s.train));
                val.extend_from_slice(ds.frames_in(s.val));
            }
            let vae = Vae::new(cfg.vae.model.clone(), cfg.seed);
            let (vae, curve) = train_vae(vae, &train, &val, &cfg.vae.train)?;
            save_checkpoint(&vae, &meta(&cfg, Some(&curve)), &out.join("vae.ckpt"))?;
            write(&out.join("curve.csv"), curve_csv(&curve))?;
            println!("best validation loss {:.6} at iteration {}", curve.best_val, curve.best_iter);
        }
        Command::TrainWm {
            data,
            vae,
            depth,
            unified,
            out,
        } => {
            if data.len() > 1 && !unified {
                bail!("several datasets given; pass --unified to train one model on all of them");
            }
            mkdir(&out)?;
            let vae = load_vae(&vae)?;
            let windows = data
                .iter()
                .map(|p| {
                    let l = load_encoded(&cfg, p, &vae)?;
                    Ok(EnvWindows::new(l.encoded, l.split.train.end))
                })
                .collect::<Result<Vec<_>>>()?;
            let model_cfg = WmConfig {
                depth: depth.unwrap_or(cfg.wm.model.depth),
                ..cfg.wm.model.clone()
            };
            let model = WmModel::new(model_cfg, cfg.seed)?;
            let (wm, curve) = train_wm(model, &windows, &cfg.wm.train)?;
            save_checkpoint(&wm, &meta(&cfg, Some(&curve)), &out.join("wm.ckpt"))?;
            write(&out.join("curve.csv"), curve_csv(&curve))?;
            println!("best validation loss {:.6} at iteration {}", curve.best_val, curve.best_iter);
        }
        Command::TrainPredictors { data, vae, out } => {
            mkdir(&out)?;
            let vae = load_vae(&vae)?;
            let l = load_encoded(&cfg, &data, &vae)?;
            let mut all = serde_json::Map::new();
            for kind in [PredictorKind::Reward, PredictorKind::Termination] {
                let (xs, ys) = examples(&l.encoded, l.split.train.clone(), kind);
                let (vx, vy) = examples(&l.encoded, l.split.val.clone(), kind);
                let (p, reports) = train_predictor(kind, (&xs, &ys), (&vx, &vy), &cfg.predictor)?;
                save_checkpoint(&p, &meta(&cfg, None), &out.join(format!("{}.ckpt", kind.name())))?;
                println!("{} predictor: smoothing {}", kind.name(), p.smoothing);
                all.insert(kind.name().to_string(), serde_json::to_value(reports)?);
            }
            write(&out.join("candidates.json"), serde_json::to_vec_pretty(&all)?)?;
        }
        Command::TrainDreamPolicy {
            data,
            vae,
            wm,
            predictors,
            horizon,
            out,
        } => {
            mkdir(&out)?;
            let vae = load_vae(&vae)?;
            let l = load_encoded(&cfg, &data, &vae)?;
            let (wm, _) = load_checkpoint::<WmModel>(&wm)?;
            let (reward, termination) = load_predictors(&predictors)?;
            let im = wmlab::wm::Imaginer {
                wm: &wm,
                vae: &vae,
                reward: &reward,
                termination: &termination,
            };
            let run = DreamRunConfig {
                horizon: horizon.unwrap_or(cfg.dream.horizon),
                seed_steps: cfg.dream.seed_steps,
                seed: cfg.seed,
            };
            let (policy, curve) = train_in_imagination(im, &l.spec, &l.encoded, l.split.train, &cfg.dream.ppo, &run)?;
            save_checkpoint(&policy, &meta(&cfg, None), &out.join("policy.ckpt"))?;
            write(
                &out.join("dream.csv"),
                series_csv(&[("mean_reward", curve.mean_reward.clone()), ("entropy", curve.entropy.clone())]),
            )?;
            println!(
                "{} envs x {} steps per iteration ({} steps)",
                curve.envs, curve.horizon, curve.steps_per_iteration
            );
        }
        Command::EvalPolicy {
            env,
            policy,
            vae,
            expert,
            episodes,
        } => {
            let spec = spec_named(&cfg, &env)?;
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let seed = wmlab::store::eval_seed(cfg.seed);
            let (p, _) = load_checkpoint::<ActorCritic>(&policy)?;
            let vae = vae.map(|v| load_vae(&v)).transpose()?;
            let view = vae.as_ref().map_or(FrameView::Raw, FrameView::Reconstructed);
            let ret = mean(&evaluate_policy(&p, &spec, n, seed, view)?);
            let rnd = mean(&random_policy_returns(&spec, n, seed)?);
            println!("policy return {ret:.3}");
            println!("random return {rnd:.3}");
            if let Some(e) = expert {
                let (ex, _) = load_checkpoint::<ActorCritic>(&e)?;
                let er = mean(&evaluate_policy(&ex, &spec, n, seed, FrameView::Raw)?);
                println!("expert return {er:.3}");
                println!("normalized score {:.3}", normalized_score(ret, rnd, er)?);
            }
        }
        Command::Sweep {
            data,
            vae,
            depth,
            seeds,
            unified,
            out,
        } => {
            if data.len() > 1 && !unified {
                bail!("several datasets given; pass --unified to sweep one model on all of them");
            }
            let vae = load_vae(&vae)?;
            let windows = data
                .iter()
                .map(|p| {
                    let l = load_encoded(&cfg, p, &vae)?;
                    Ok(EnvWindows::new(l.encoded, l.split.train.end))
                })
                .collect::<Result<Vec<_>>>()?;
            let depths = if depth.is_empty() { cfg.sweep.depths.clone() } else { depth };
            let r = run_depth_sweep(
                &windows,
                &cfg.wm.model,
                &depths,
                seeds.unwrap_or(cfg.sweep.seeds),
                &cfg.sweep.train,
                cfg.seed,
            )?;
            let label = r.env.clone();
            write_sweep(&out, &label, &r, &cfg)?;
        }
        Command::Mix {
            data,
            vae,
            total,
            split,
            depth,
            seeds,
            out,
        } => {
            let vae = load_vae(&vae)?;
            let a = load_encoded(&cfg, &data[0], &vae)?;
            let b = load_encoded(&cfg, &data[1], &vae)?;
            let depths = if depth.is_empty() { cfg.sweep.depths.clone() } else { depth };
            let r = budget_mix_experiment(
                &a.encoded,
                &b.encoded,
                total,
                split,
                cfg.collect.val_fraction,
                &cfg.wm.model,
                &depths,
                seeds.unwrap_or(cfg.sweep.seeds),
                &cfg.sweep.train,
                cfg.seed,
            )?;
            mkdir(&out)?;
            write(&out.join("mix.json"), serde_json::to_vec_pretty(&r)?)?;
            println!("shares: {} {} / {} {}", a.dataset.env_name, r.share_a, b.dataset.env_name, r.share_b);
            write_sweep(&out.join(&r.a.env), &r.a.env.clone(), &r.a, &cfg)?;
            if let Some(rb) = &r.b {
                write_sweep(&out.join(&rb.env), &rb.env.clone(), rb, &cfg)?;
            }
        }
        Command::Classify {
            sweep,
            values,
            stderr,
            threshold,
        } => {
            let t = threshold.unwrap_or(cfg.sweep.sat_threshold);
            if let Some(p) = sweep {
                let r: SweepResult = read_json(&p).map_err(anyhow::Error::msg)?;
                for (env, label) in r.env_regimes(t)? {
                    println!("{env}: {label}");
                }
            } else {
                let s = if stderr.is_empty() { vec![0.0; values.len()] } else { stderr };
                println!("{}", classify_regime(&values, &s, t)?);
            }
        }
        Command::Report { sweeps, out } => {
            mkdir(&out)?;
            let mut summaries = Vec::new();
            for p in &sweeps {
                let r: SweepResult = read_json(p).map_err(anyhow::Error::msg)?;
                let label = r.env.clone();
                let file = label.replace('+', "_");
                write(&out.join(format!("{file}_loss_vs_depth.svg")), loss_vs_depth_svg(&label, &r))?;
                write(
                    &out.join(format!("{file}_loss_vs_iteration.svg")),
                    loss_vs_iteration_svg(&label, &r, cfg.sweep.filter_trim, cfg.sweep.filter_window),
                )?;
                summaries.push(SweepSummary::from_sweep(&label, &r, cfg.sweep.sat_threshold)?);
            }
            write(&out.join("report.json"), serde_json::to_vec_pretty(&summaries)?)?;
            for s in &summaries {
                for (env, label) in &s.regimes {
                    println!("{}: {env} {label}", s.name);
                }
            }
        }
        Command::Imagine {
            data,
            vae,
            wm,
            predictors,
            policy,
            horizon,
            out,
        } => {
            mkdir(&out)?;
            let vae = load_vae(&vae)?;
            let l = load_encoded(&cfg, &data, &vae)?;
            let (wm, _) = load_checkpoint::<WmModel>(&wm)?;
            let (reward, termination) = load_predictors(&predictors)?;
            let policy = policy.map(|p| load_checkpoint::<ActorCritic>(&p).map(|x| x.0)).transpose()?;
            let seed = sample_seed(&l.encoded, l.split.train.clone(), cfg.dream.seed_steps, cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let actions = l.spec.action_count;
            let mut act = |frames: &[f64]| -> usize {
                match &policy {
                    Some(p) => {
                        let (lp, _) = p.evaluate(frames).expect("policy matches frame layout");
                        sample_categorical(&lp, &mut rng)
                    }
                    None => rand::Rng::gen_range(&mut rng, 0..actions),
                }
            };
            let steps = imagine(&wm, &vae, &l.spec, &seed, &mut act, &reward, &termination, horizon)?;
            let g = l.spec.grid_size;
            for (t, s) in steps.iter().enumerate() {
                let obs = wmlab::env::Observation {
                    grid: g,
                    pixels: s.observation.clone(),
                };
                write(&out.join(format!("frame_{t:04}.pgm")), obs.to_pgm())?;
            }
            write(
                &out.join("rollout.csv"),
                series_csv(&[
                    ("action", steps.iter().map(|s| s.action as f64).collect()),
                    ("reward", steps.iter().map(|s| s.reward).collect()),
                    ("done", steps.iter().map(|s| s.done as u8 as f64).collect()),
                ]),
            )?;
            println!("{} imagined steps written to {}", steps.len(), out.display());
        }
        Command::Pipeline { out } => {
            let root = out
                .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("wmlab-runs"));
            let outcome = run_pipeline(&cfg, &root)?;
            for s in &outcome.stages {
                println!("{:<28} {} {}", s.stage, s.key, if s.skipped { "cached" } else { "ran" });
            }
            for (env, r) in &outcome.report.envs {
                println!(
                    "{env}: expert {:.3} random {:.3} dream {:.3} score {}",
                    r.expert_return,
                    r.random_return,
                    r.dream_return,
                    r.normalized_score.map_or("undefined".into(), |s| format!("{s:.3}"))
                );
            }
            for s in &outcome.report.sweeps {
                for (env, label) in &s.regimes {
                    println!("sweep {}: {env} {label}", s.name);
                }
            }
            println!("report: {}", outcome.report_dir.display());
        }
        Command::Render { env, steps, out } => {
            mkdir(&out)?;
            let spec = spec_named(&cfg, &env)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (mut e, mut obs) = Env::reset(&spec, cfg.seed)?;
            for t in 0..steps {
                write(&out.join(format!("frame_{t:04}.pgm")), obs.to_pgm())?;
                let a = rand::Rng::gen_range(&mut rng, 0..spec.action_count);
                let s = e.step(a)?;
                obs = s.observation;
                if s.terminated {
                    (e, obs) = Env::reset(&spec, cfg.seed.wrapping_add(t as u64 + 1))?;
                }
            }
            println!("{steps} frames written to {}", out.display());
        }
    }
    Ok(())
}
