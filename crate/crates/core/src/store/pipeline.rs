use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta},
    config::{content_hash, RunConfig},
    dataset::{load_dataset, save_dataset, split_dataset, DatasetSplit, TrajectoryDataset},
    report::{loss_vs_depth_svg, loss_vs_iteration_svg, series_csv, EnvReport, Report, ScatterPoint, SweepSummary},
};
use crate::env::EnvSpec;
use crate::ppo::{
    collect_offline, evaluate_policy, random_policy_returns, train_expert, train_in_imagination, ActorCritic,
    DreamRunConfig, FrameView,
};
use crate::predictor::{examples, train_predictor, CandidateReport, Predictor, PredictorKind};
use crate::sweep::{run_depth_sweep, LossCurve, SweepResult};
use crate::vae::{train_vae, Vae};
use crate::wm::{train_wm, EncodedDataset, EnvWindows, Imaginer, WmConfig, WmModel};

/// Environment variable naming the artifact root directory.
pub const ROOT_ENV: &str = "WMLAB_ROOT";
const DONE: &str = "done.json";

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub message: String,
}

fn fail(stage: &str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError + '_ {
    move |e| PipelineError {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

/// Whether a stage ran or was served from its cached directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: Report,
    pub report_dir: PathBuf,
    pub stages: Vec<StageRecord>,
}

impl PipelineOutcome {
    pub fn ran(&self, prefix: &str) -> bool {
        self.stages.iter().any(|s| s.stage.starts_with(prefix) && !s.skipped)
    }
}

/// Runs every stage in dependency order under `root`. Each stage writes
/// into `root/<stage>/<key>/`, where the key hashes the stage's inputs
/// and upstream keys; a stage whose directory is complete is skipped.
pub struct Pipeline {
    root: PathBuf,
    cfg: RunConfig,
    stages: Vec<StageRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("value serializes"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct EvalScores {
    expert_return: f64,
    random_return: f64,
    dream_return: f64,
    normalized_score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PredictorReports {
    reward: Vec<CandidateReport>,
    termination: Vec<CandidateReport>,
    reward_smoothing: f64,
    termination_smoothing: f64,
}

struct EnvArtifacts {
    spec: EnvSpec,
    expert_key: String,
    collect_key: String,
    dataset: TrajectoryDataset,
    split: DatasetSplit,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, root: &Path) -> Result<Self, PipelineError> {
        cfg.validate().map_err(|e| fail("config")(&e))?;
        Ok(Self {
            root: root.to_path_buf(),
            cfg,
            stages: Vec::new(),
        })
    }

    /// Returns the stage directory, running `compute` into a scratch
    /// directory first when no complete one exists.
    fn stage<K: Serialize>(
        &mut self,
        name: &str,
        inputs: &K,
        compute: impl FnOnce(&Path) -> Result<(), PipelineError>,
    ) -> Result<PathBuf, PipelineError> {
        let key = content_hash(&json!({ "stage": name, "inputs": inputs }))[..16].to_string();
        let base = self.root.join(name.split('/').next().unwrap());
        let dir = base.join(&key);
        let skipped = dir.join(DONE).exists();
        if !skipped {
            let err = fail(name);
            let tmp = base.join(format!(".{key}.partial"));
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp).map_err(|e| err(&e))?;
            }
            std::fs::create_dir_all(&tmp).map_err(|e| err(&e))?;
            log::info!("stage {name} ({key}) running");
            compute(&tmp)?;
            std::fs::write(tmp.join("config.toml"), self.cfg.to_toml()).map_err(|e| err(&e))?;
            write_json(
                &tmp.join(DONE),
                &json!({ "stage": name, "key": key, "seed": self.cfg.seed, "inputs": inputs }),
            )
            .map_err(|e| err(&e))?;
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| err(&e))?;
            }
            std::fs::rename(&tmp, &dir).map_err(|e| err(&e))?;
        } else {
            log::info!("stage {name} ({key}) cached");
        }
        self.stages.push(StageRecord {
            stage: name.to_string(),
            key,
            skipped,
        });
        Ok(dir)
    }

    fn key_of(&self, dir: &Path) -> String {
        dir.file_name().unwrap().to_string_lossy().into_owned()
    }

    fn env_stages(&mut self, spec: &EnvSpec) -> Result<EnvArtifacts, PipelineError> {
        let cfg = self.cfg.clone();
        let name = spec.name.clone();
        let st = format!("expert/{name}");
        let expert_dir = self.stage(&st, &json!({ "env": spec, "ppo": cfg.expert, "seed": cfg.seed }), |dir| {
            let err = fail(&st);
            let (policy, curve) = train_expert(spec, &cfg.expert, cfg.seed).map_err(|e| err(&e))?;
            let meta = CheckpointMeta {
                seed: cfg.seed,
                config_hash: content_hash(&cfg.expert),
                iteration: curve.iterations.len(),
                best_metric: curve.best_running,
            };
            save_checkpoint(&policy, &meta, &dir.join("policy.ckpt")).map_err(|e| err(&e))?;
            write_json(&dir.join("curve.json"), &curve).map_err(|e| err(&e))
        })?;
        let expert_key = self.key_of(&expert_dir);

        let sc = format!("collect/{name}");
        let collect_dir = self.stage(
            &sc,
            &json!({ "expert": expert_key, "budget": cfg.collect.budget, "seed": cfg.seed }),
            |dir| {
                let err = fail(&sc);
                let (expert, _): (ActorCritic, _) =
                    load_checkpoint(&expert_dir.join("policy.ckpt")).map_err(|e| err(&e))?;
                let c = collect_offline(spec, &expert, cfg.collect.budget, cfg.seed).map_err(|e| err(&e))?;
                save_dataset(&c.dataset, &dir.join("dataset.bin")).map_err(|e| err(&e))
            },
        )?;
        let collect_key = self.key_of(&collect_dir);
        let err = fail(&sc);
        let dataset = load_dataset(&collect_dir.join("dataset.bin")).map_err(|e| err(&e))?;
        let split = split_dataset(&dataset, cfg.collect.val_fraction).map_err(|e| err(&e))?;
        Ok(EnvArtifacts {
            spec: spec.clone(),
            expert_key,
            collect_key,
            dataset,
            split,
        })
    }

    pub fn run(mut self) -> Result<PipelineOutcome, PipelineError> {
        let cfg = self.cfg.clone();
        let specs = cfg.env_specs().map_err(|e| fail("config")(&e))?;
        let mut envs = Vec::with_capacity(specs.len());
        for spec in &specs {
            envs.push(self.env_stages(spec)?);
        }

        let collect_keys: Vec<&str> = envs.iter().map(|e| e.collect_key.as_str()).collect();
        let vae_dir = self.stage(
            "vae",
            &json!({ "data": collect_keys, "vae": cfg.vae, "val_fraction": cfg.collect.val_fraction, "seed": cfg.seed }),
            |dir| {
                let err = fail("vae");
                let mut train = Vec::new();
                let mut val = Vec::new();
                for e in &envs {
                    train.extend_from_slice(e.dataset.frames_in(e.split.train.clone()));
                    val.extend_from_slice(e.dataset.frames_in(e.split.val.clone()));
                }
                let vae = Vae::new(cfg.vae.model.clone(), cfg.seed);
                let (vae, curve) = train_vae(vae, &train, &val, &cfg.vae.train).map_err(|e| err(&e))?;
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    config_hash: content_hash(&cfg.vae),
                    iteration: curve.best_iter,
                    best_metric: Some(curve.best_val),
                };
                save_checkpoint(&vae, &meta, &dir.join("vae.ckpt")).map_err(|e| err(&e))?;
                write_json(&dir.join("curve.json"), &curve).map_err(|e| err(&e))
            },
        )?;
        let vae_key = self.key_of(&vae_dir);
        let (vae, _): (Vae, _) = load_checkpoint(&vae_dir.join("vae.ckpt")).map_err(|e| fail("vae")(&e))?;
        let encoded: Vec<EncodedDataset> = envs
            .iter()
            .map(|e| e.dataset.encode(&vae, &e.spec))
            .collect::<Result<_, _>>()
            .map_err(|e| fail("encode")(&e))?;

        let mut env_reports = BTreeMap::new();
        let mut scatter = Vec::new();
        for (e, enc) in envs.iter().zip(&encoded) {
            let r = self.policy_stages(e, enc, &vae, &vae_key)?;
            scatter.push(ScatterPoint {
                env: e.spec.name.clone(),
                reward_f1: r.reward_f1,
                termination_f1: r.termination_f1,
                normalized_score: r.normalized_score,
            });
            env_reports.insert(e.spec.name.clone(), r);
        }

        let mut sweeps = Vec::new();
        let mut sweep_results = Vec::new();
        if !cfg.sweep.depths.is_empty() {
            let groups: Vec<Vec<usize>> = if cfg.sweep.unified {
                vec![(0..envs.len()).collect()]
            } else {
                (0..envs.len()).map(|i| vec![i]).collect()
            };
            for g in groups {
                let names: Vec<&str> = g.iter().map(|&i| envs[i].spec.name.as_str()).collect();
                let label = names.join("+");
                let st = format!("sweep/{label}");
                let base = WmConfig {
                    depth: 0,
                    ..cfg.wm.model.clone()
                };
                let keys: Vec<&str> = g.iter().map(|&i| envs[i].collect_key.as_str()).collect();
                let dir = self.stage(
                    &st,
                    &json!({ "vae": vae_key, "data": keys, "model": base, "sweep": cfg.sweep,
                             "val_fraction": cfg.collect.val_fraction, "seed": cfg.seed }),
                    |dir| {
                        let windows: Vec<EnvWindows> = g
                            .iter()
                            .map(|&i| EnvWindows::new(encoded[i].clone(), envs[i].split.train.end))
                            .collect();
                        let r = run_depth_sweep(
                            &windows,
                            &cfg.wm.model,
                            &cfg.sweep.depths,
                            cfg.sweep.seeds,
                            &cfg.sweep.train,
                            cfg.seed,
                        )
                        .map_err(|e| fail(&st)(&e))?;
                        write_json(&dir.join("sweep.json"), &r).map_err(|e| fail(&st)(&e))
                    },
                )?;
                let r: SweepResult = read_json(&dir.join("sweep.json")).map_err(|e| fail(&st)(&e))?;
                sweeps.push(SweepSummary::from_sweep(&label, &r, cfg.sweep.sat_threshold).map_err(|e| fail(&st)(&e))?);
                sweep_results.push((label, r));
            }
        }

        let report = Report {
            config_hash: content_hash(&cfg),
            seed: cfg.seed,
            envs: env_reports,
            sweeps,
            scatter,
        };
        let report_dir = self.root.join("report").join(&report.config_hash[..16]);
        self.write_report(&report, &report_dir, &sweep_results)
            .map_err(|e| fail("report")(&e))?;
        Ok(PipelineOutcome {
            report,
            report_dir,
            stages: self.stages,
        })
    }

    fn policy_stages(
        &mut self,
        e: &EnvArtifacts,
        enc: &EncodedDataset,
        vae: &Vae,
        vae_key: &str,
    ) -> Result<EnvReport, PipelineError> {
        let cfg = self.cfg.clone();
        let name = e.spec.name.clone();
        let (train, val) = (e.split.train.clone(), e.split.val.clone());

        let sw = format!("wm/{name}");
        let wm_dir = self.stage(
            &sw,
            &json!({ "vae": vae_key, "data": e.collect_key, "wm": cfg.wm,
                     "val_fraction": cfg.collect.val_fraction, "seed": cfg.seed }),
            |dir| {
                let err = fail(&sw);
                let model = WmModel::new(cfg.wm.model.clone(), cfg.seed).map_err(|e| err(&e))?;
                let windows = [EnvWindows::new(enc.clone(), train.end)];
                let (wm, curve) = train_wm(model, &windows, &cfg.wm.train).map_err(|e| err(&e))?;
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    config_hash: content_hash(&cfg.wm),
                    iteration: curve.best_iter,
                    best_metric: Some(curve.best_val),
                };
                save_checkpoint(&wm, &meta, &dir.join("wm.ckpt")).map_err(|e| err(&e))?;
                write_json(&dir.join("curve.json"), &curve).map_err(|e| err(&e))
            },
        )?;

        let sp = format!("predictors/{name}");
        let pred_dir = self.stage(
            &sp,
            &json!({ "vae": vae_key, "data": e.collect_key, "predictor": cfg.predictor,
                     "val_fraction": cfg.collect.val_fraction }),
            |dir| {
                let err = fail(&sp);
                let mut reports = Vec::new();
                for kind in [PredictorKind::Reward, PredictorKind::Termination] {
                    let (xs, ys) = examples(enc, train.clone(), kind);
                    let (vx, vy) = examples(enc, val.clone(), kind);
                    let (p, r) = train_predictor(kind, (&xs, &ys), (&vx, &vy), &cfg.predictor).map_err(|e| err(&e))?;
                    let meta = CheckpointMeta {
                        seed: cfg.predictor.seed,
                        config_hash: content_hash(&cfg.predictor),
                        iteration: cfg.predictor.iters,
                        best_metric: None,
                    };
                    save_checkpoint(&p, &meta, &dir.join(format!("{}.ckpt", kind.name()))).map_err(|e| err(&e))?;
                    reports.push((p.smoothing, r));
                }
                let (t, r) = (reports.pop().unwrap(), reports.pop().unwrap());
                write_json(
                    &dir.join("candidates.json"),
                    &PredictorReports {
                        reward: r.1,
                        termination: t.1,
                        reward_smoothing: r.0,
                        termination_smoothing: t.0,
                    },
                )
                .map_err(|e| err(&e))
            },
        )?;
        let wm_key = self.key_of(&wm_dir);
        let pred_key = self.key_of(&pred_dir);
        let errp = fail(&sp);
        let (reward, _): (Predictor, _) = load_checkpoint(&pred_dir.join("reward.ckpt")).map_err(|e| errp(&e))?;
        let (termination, _): (Predictor, _) =
            load_checkpoint(&pred_dir.join("termination.ckpt")).map_err(|e| errp(&e))?;
        let reports: PredictorReports = read_json(&pred_dir.join("candidates.json")).map_err(|e| errp(&e))?;

        let sd = format!("dream/{name}");
        let dream_dir = self.stage(
            &sd,
            &json!({ "wm": wm_key, "predictors": pred_key, "dream": cfg.dream, "seed": cfg.seed }),
            |dir| {
                let err = fail(&sd);
                let (wm, _): (WmModel, _) = load_checkpoint(&wm_dir.join("wm.ckpt")).map_err(|e| err(&e))?;
                let im = Imaginer {
                    wm: &wm,
                    vae,
                    reward: &reward,
                    termination: &termination,
                };
                let run = DreamRunConfig {
                    horizon: cfg.dream.horizon,
                    seed_steps: cfg.dream.seed_steps,
                    seed: cfg.seed,
                };
                let (policy, curve) =
                    train_in_imagination(im, &e.spec, enc, train.clone(), &cfg.dream.ppo, &run).map_err(|e| err(&e))?;
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    config_hash: content_hash(&cfg.dream),
                    iteration: cfg.dream.ppo.max_iters,
                    best_metric: None,
                };
                save_checkpoint(&policy, &meta, &dir.join("policy.ckpt")).map_err(|e| err(&e))?;
                write_json(&dir.join("curve.json"), &curve).map_err(|e| err(&e))
            },
        )?;
        let dream_key = self.key_of(&dream_dir);

        let se = format!("eval/{name}");
        let expert_ckpt = self.root.join("expert").join(&e.expert_key).join("policy.ckpt");
        let eval_dir = self.stage(
            &se,
            &json!({ "dream": dream_key, "expert": e.expert_key, "vae": vae_key, "eval": cfg.eval, "seed": cfg.seed }),
            |dir| {
                let err = fail(&se);
                let (expert, _): (ActorCritic, _) = load_checkpoint(&expert_ckpt).map_err(|e| err(&e))?;
                let (dream, _): (ActorCritic, _) =
                    load_checkpoint(&dream_dir.join("policy.ckpt")).map_err(|e| err(&e))?;
                let n = cfg.eval.episodes;
                let seed = eval_seed(cfg.seed);
                let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                let expert_return = mean(evaluate_policy(&expert, &e.spec, n, seed, FrameView::Raw).map_err(|e| err(&e))?);
                let random_return = mean(random_policy_returns(&e.spec, n, seed).map_err(|e| err(&e))?);
                let dream_return =
                    mean(evaluate_policy(&dream, &e.spec, n, seed, FrameView::Reconstructed(vae)).map_err(|e| err(&e))?);
                let normalized_score = crate::ppo::normalized_score(dream_return, random_return, expert_return).ok();
                write_json(
                    &dir.join("scores.json"),
                    &EvalScores {
                        expert_return,
                        random_return,
                        dream_return,
                        normalized_score,
                    },
                )
                .map_err(|e| err(&e))
            },
        )?;
        let scores: EvalScores = read_json(&eval_dir.join("scores.json")).map_err(|e| fail(&se)(&e))?;
        let wm_curve: LossCurve = read_json(&wm_dir.join("curve.json")).map_err(|e| fail(&sw)(&e))?;
        let best_f1 = |c: &[CandidateReport], s: f64| c.iter().find(|r| r.smoothing == s).map_or(0.0, |r| r.f1);
        Ok(EnvReport {
            expert_return: scores.expert_return,
            random_return: scores.random_return,
            dream_return: scores.dream_return,
            normalized_score: scores.normalized_score,
            reward_f1: best_f1(&reports.reward, reports.reward_smoothing),
            termination_f1: best_f1(&reports.termination, reports.termination_smoothing),
            reward_candidates: reports.reward,
            termination_candidates: reports.termination,
            wm_best_val: wm_curve.best_val,
        })
    }

    fn write_report(&self, report: &Report, dir: &Path, sweeps: &[(String, SweepResult)]) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml())?;
        for (label, r) in sweeps {
            let file = label.replace('+', "_");
            std::fs::write(dir.join(format!("{file}_loss_vs_depth.svg")), loss_vs_depth_svg(label, r))?;
            std::fs::write(
                dir.join(format!("{file}_loss_vs_iteration.svg")),
                loss_vs_iteration_svg(label, r, self.cfg.sweep.filter_trim, self.cfg.sweep.filter_window),
            )?;
            let depth = r.depths.iter().map(|&d| d as f64).collect();
            std::fs::write(
                dir.join(format!("{file}_depths.csv")),
                series_csv(&[("depth", depth), ("mean_best", r.best_vals()), ("std_error", r.std_errors())]),
            )?;
        }
        let scores: Vec<f64> = report.scatter.iter().map(|s| s.normalized_score.unwrap_or(f64::NAN)).collect();
        std::fs::write(
            dir.join("scatter.csv"),
            series_csv(&[
                ("reward_f1", report.scatter.iter().map(|s| s.reward_f1).collect()),
                ("termination_f1", report.scatter.iter().map(|s| s.termination_f1).collect()),
                ("normalized_score", scores),
            ]),
        )
    }
}

/// Episode seeds for evaluation, disjoint in practice from training ones.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x0e7a_1000_0000
}

/// Convenience wrapper: [`Pipeline::new`] then [`Pipeline::run`].
pub fn run_pipeline(cfg: &RunConfig, root: &Path) -> Result<PipelineOutcome, PipelineError> {
    Pipeline::new(cfg.clone(), root)?.run()
}
