use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{classify_regime, mean, std_error, LossCurve, RegimeLabel, SweepError};
use crate::store::split_episodes;
use crate::wm::{train_wm, EncodedDataset, EnvWindows, WmConfig, WmModel, WmTrainConfig};

/// Training loss below which a model counts as having interpolated.
pub const INTERPOLATION_LOSS: f64 = 1e-3;

/// Per-environment slice of a unified depth point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPoint {
    pub seed_best: Vec<f64>,
    pub mean_best: f64,
    pub std_error: f64,
    pub mean_val: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub depth: usize,
    /// Best validation loss of each seed.
    pub seed_best: Vec<f64>,
    pub mean_best: f64,
    pub std_error: f64,
    /// Seed-averaged curve, truncated to the shortest seed.
    pub mean_curve: LossCurve,
    /// First evaluation at which the mean training loss fell below
    /// [`INTERPOLATION_LOSS`].
    pub interpolation_iter: Option<usize>,
    pub per_env: BTreeMap<String, EnvPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Environment name, or the `+`-joined names in unified mode.
    pub env: String,
    pub envs: Vec<String>,
    pub unified: bool,
    pub depths: Vec<usize>,
    pub seeds: usize,
    pub points: Vec<DepthPoint>,
}

impl SweepResult {
    pub fn best_vals(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_best).collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.std_error).collect()
    }

    pub fn regime(&self, sat_threshold: f64) -> Result<RegimeLabel, SweepError> {
        classify_regime(&self.best_vals(), &self.std_errors(), sat_threshold)
    }

    /// One label per environment: per-environment series in unified mode,
    /// the aggregate otherwise. Sweeps over fewer than three depths are
    /// labelled indeterminate.
    pub fn env_regimes(&self, sat_threshold: f64) -> Result<BTreeMap<String, RegimeLabel>, SweepError> {
        if self.depths.len() < 3 {
            return Ok(self.envs.iter().map(|e| (e.clone(), RegimeLabel::Indeterminate)).collect());
        }
        if !self.unified {
            return Ok(BTreeMap::from([(self.env.clone(), self.regime(sat_threshold)?)]));
        }
        self.envs
            .iter()
            .map(|e| {
                let r = self.project(e).expect("unified sweeps carry every environment");
                Ok((e.clone(), r.regime(sat_threshold)?))
            })
            .collect()
    }

    /// The validation results of one environment of a unified sweep as a
    /// single-environment result.
    pub fn project(&self, env: &str) -> Option<SweepResult> {
        if !self.unified {
            return (env == self.env).then(|| self.clone());
        }
        let points = self
            .points
            .iter()
            .map(|p| {
                let e = p.per_env.get(env)?;
                let mut curve = p.mean_curve.clone();
                curve.val_loss = e.mean_val.clone();
                curve.per_env_val.clear();
                curve.best_val = e.mean_best;
                Some(DepthPoint {
                    depth: p.depth,
                    seed_best: e.seed_best.clone(),
                    mean_best: e.mean_best,
                    std_error: e.std_error,
                    mean_curve: curve,
                    interpolation_iter: p.interpolation_iter,
                    per_env: BTreeMap::new(),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(SweepResult {
            env: env.to_string(),
            envs: vec![env.to_string()],
            unified: false,
            depths: self.depths.clone(),
            seeds: self.seeds,
            points,
        })
    }

    /// Environments whose best validation loss never rises with depth
    /// beyond the standard-error tolerance.
    pub fn never_hurts(&self) -> BTreeMap<String, bool> {
        let check = |r: &SweepResult| {
            let (v, s) = (r.best_vals(), r.std_errors());
            let tau = s.iter().cloned().fold(0.0, f64::max);
            v.windows(2).all(|w| w[1] <= w[0] + tau)
        };
        self.envs
            .iter()
            .filter_map(|e| self.project(e).map(|r| (e.clone(), check(&r))))
            .collect()
    }
}

fn mean_series(series: &[&[f64]]) -> Vec<f64> {
    let n = series.iter().map(|s| s.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| series.iter().map(|s| s[i]).sum::<f64>() / series.len() as f64)
        .collect()
}

fn mean_curve(curves: &[LossCurve]) -> LossCurve {
    let n = curves.iter().map(|c| c.val_loss.len()).min().unwrap_or(0);
    let first = &curves[0];
    let mut out = LossCurve::new(first.eval_interval);
    let train = mean_series(&curves.iter().map(|c| c.train_loss.as_slice()).collect::<Vec<_>>());
    let val = mean_series(&curves.iter().map(|c| c.val_loss.as_slice()).collect::<Vec<_>>());
    for i in 0..n {
        out.record(first.iterations[i], train[i], val[i]);
    }
    for env in first.per_env_val.keys() {
        let s: Vec<&[f64]> = curves.iter().map(|c| c.per_env_val[env].as_slice()).collect();
        out.per_env_val.insert(env.clone(), mean_series(&s));
    }
    out.stopped_early = curves.iter().all(|c| c.stopped_early);
    out
}

/// Trains one world model per `(depth, seed)` on `envs` (unified when more
/// than one) and aggregates per depth. Model and sampling seeds are
/// `base_seed + seed index`.
pub fn run_depth_sweep(
    envs: &[EnvWindows],
    base: &WmConfig,
    depths: &[usize],
    seeds: usize,
    train: &WmTrainConfig,
    base_seed: u64,
) -> Result<SweepResult, SweepError> {
    if envs.is_empty() {
        return Err(SweepError::MissingDataset("no environments given".into()));
    }
    if depths.is_empty() || seeds == 0 || depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SweepError::InvalidArgument(format!(
            "depths {depths:?} must be strictly increasing and seeds {seeds} positive"
        )));
    }
    for e in envs {
        if e.data.is_empty() {
            return Err(SweepError::MissingDataset(e.name().to_string()));
        }
    }
    let names: Vec<String> = envs.iter().map(|e| e.name().to_string()).collect();
    let unified = envs.len() > 1;
    let mut points = Vec::with_capacity(depths.len());
    for &depth in depths {
        let cfg = WmConfig {
            depth,
            ..base.clone()
        };
        let mut curves = Vec::with_capacity(seeds);
        for r in 0..seeds {
            let seed = base_seed + r as u64;
            let model = WmModel::new(cfg.clone(), seed)?;
            let tc = WmTrainConfig {
                seed,
                ..train.clone()
            };
            let (_, curve) = train_wm(model, envs, &tc)?;
            log::info!("sweep depth {depth} seed {seed}: best val {:.6}", curve.best_val);
            curves.push(curve);
        }
        let seed_best: Vec<f64> = curves.iter().map(|c| c.best_val).collect();
        let mc = mean_curve(&curves);
        let interpolation_iter = mc
            .train_loss
            .iter()
            .position(|&l| l < INTERPOLATION_LOSS)
            .map(|i| mc.iterations[i]);
        let mut per_env = BTreeMap::new();
        if unified {
            for name in &names {
                let best: Vec<f64> = curves
                    .iter()
                    .map(|c| c.per_env_val[name].iter().cloned().fold(f64::INFINITY, f64::min))
                    .collect();
                per_env.insert(
                    name.clone(),
                    EnvPoint {
                        mean_best: mean(&best),
                        std_error: std_error(&best),
                        seed_best: best,
                        mean_val: mc.per_env_val[name].clone(),
                    },
                );
            }
        }
        points.push(DepthPoint {
            depth,
            mean_best: mean(&seed_best),
            std_error: std_error(&seed_best),
            seed_best,
            mean_curve: mc,
            interpolation_iter,
            per_env,
        });
    }
    Ok(SweepResult {
        env: names.join("+"),
        envs: names,
        unified,
        depths: depths.to_vec(),
        seeds,
        points,
    })
}

/// Outcome of training on a fixed-budget mixture of two environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixResult {
    pub share_a: usize,
    pub share_b: usize,
    pub a: SweepResult,
    /// `None` when the split gives every transition to the first environment.
    pub b: Option<SweepResult>,
}

/// Truncates each dataset to its share of `total` (earliest transitions
/// kept), splits each for validation, and sweeps depth on the mixture.
#[allow(clippy::too_many_arguments)]
pub fn budget_mix_experiment(
    a: &EncodedDataset,
    b: &EncodedDataset,
    total: usize,
    split: f64,
    val_fraction: f64,
    base: &WmConfig,
    depths: &[usize],
    seeds: usize,
    train: &WmTrainConfig,
    base_seed: u64,
) -> Result<MixResult, SweepError> {
    if !(0.0..=1.0).contains(&split) {
        return Err(SweepError::InvalidArgument(format!("split {split} outside [0, 1]")));
    }
    let exact = split * total as f64;
    if (exact - exact.round()).abs() > 1e-9 {
        return Err(SweepError::InvalidArgument(format!(
            "split {split} of {total} is not a whole number of transitions"
        )));
    }
    let share_a = exact.round() as usize;
    let share_b = total - share_a;
    let mut windows = Vec::new();
    for (data, share) in [(a, share_a), (b, share_b)] {
        if share == 0 {
            continue;
        }
        if share > data.len() {
            return Err(SweepError::BudgetExceeded {
                env: data.env_name.clone(),
                share,
                available: data.len(),
            });
        }
        let t = data.truncated(share);
        let s = split_episodes(&t.env_name, &t.episode_start, val_fraction)
            .map_err(|e| SweepError::InvalidArgument(e.to_string()))?;
        windows.push(EnvWindows::new(t, s.train.end));
    }
    if windows.is_empty() {
        return Err(SweepError::InvalidArgument("total budget is zero".into()));
    }
    let sweep = run_depth_sweep(&windows, base, depths, seeds, train, base_seed)?;
    let pa = if share_a > 0 { sweep.project(&a.env_name) } else { None };
    let pb = if share_b > 0 { sweep.project(&b.env_name) } else { None };
    match (pa, pb) {
        (Some(a), b) => Ok(MixResult { share_a, share_b, a, b }),
        (None, Some(b)) => Ok(MixResult {
            share_a,
            share_b,
            a: b,
            b: None,
        }),
        (None, None) => unreachable!("at least one share is positive"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(name: &str, n: usize, seed: u64) -> EncodedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncodedDataset {
            env_name: name.into(),
            latent_dim: 2,
            latents: (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..n).map(|_| rng.gen_range(0..5)).collect(),
            rewards: vec![0.0; n],
            terminated: (0..n).map(|i| i % 10 == 9).collect(),
            episode_start: (0..n).map(|i| i % 10 == 0).collect(),
        }
    }

    fn tiny() -> (WmConfig, WmTrainConfig) {
        (
            WmConfig {
                depth: 1,
                embed_dim: 8,
                heads: 2,
                context_steps: 4,
                latent_dim: 2,
                ..WmConfig::default()
            },
            WmTrainConfig {
                max_iters: 6,
                eval_interval: 3,
                batch_size: 4,
                val_windows: 4,
                ..WmTrainConfig::default()
            },
        )
    }

    #[test]
    fn single_depth_single_seed_wraps_one_curve() {
        let (m, t) = tiny();
        let env = EnvWindows::new(toy("a", 60, 0), 50);
        let r = run_depth_sweep(&[env], &m, &[1], 1, &t, 0).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!(r.points[0].seed_best.len(), 1);
        assert_eq!(r.points[0].std_error, 0.0);
        assert_eq!(r.points[0].mean_best, r.points[0].seed_best[0]);
    }

    #[test]
    fn unified_reports_each_environment() {
        let (m, t) = tiny();
        let envs = [EnvWindows::new(toy("a", 60, 0), 50), EnvWindows::new(toy("b", 60, 1), 50)];
        let r = run_depth_sweep(&envs, &m, &[1, 2], 2, &t, 0).unwrap();
        assert!(r.unified);
        for p in &r.points {
            assert_eq!(p.per_env.len(), 2);
            assert!((p.mean_best - mean(&p.seed_best)).abs() < 1e-15);
        }
        let pa = r.project("a").unwrap();
        assert_eq!(pa.points[1].mean_best, r.points[1].per_env["a"].mean_best);
        assert!(r.project("c").is_none());
    }

    #[test]
    fn bad_depths_rejected() {
        let (m, t) = tiny();
        let env = EnvWindows::new(toy("a", 60, 0), 50);
        assert!(run_depth_sweep(&[env.clone()], &m, &[2, 1], 1, &t, 0).is_err());
        assert!(run_depth_sweep(&[], &m, &[1], 1, &t, 0).is_err());
    }

    #[test]
    fn mix_shares_and_errors() {
        let (m, t) = tiny();
        let (a, b) = (toy("a", 100, 0), toy("b", 100, 1));
        let r = budget_mix_experiment(&a, &b, 100, 0.5, 0.2, &m, &[1], 1, &t, 0).unwrap();
        assert_eq!((r.share_a, r.share_b), (50, 50));
        assert!(r.b.is_some());
        let solo = budget_mix_experiment(&a, &b, 100, 1.0, 0.2, &m, &[1], 1, &t, 0).unwrap();
        assert!(solo.b.is_none() && !solo.a.unified);
        assert!(matches!(
            budget_mix_experiment(&a, &b, 300, 0.5, 0.2, &m, &[1], 1, &t, 0),
            Err(SweepError::BudgetExceeded { share: 150, .. })
        ));
        assert!(budget_mix_experiment(&a, &b, 101, 0.5, 0.2, &m, &[1], 1, &t, 0).is_err());
    }

    #[test]
    fn mean_curve_truncates_to_shortest() {
        let mut c1 = LossCurve::new(5);
        let mut c2 = LossCurve::new(5);
        for i in 0..4 {
            c1.record(i * 5, 1.0, i as f64);
        }
        for i in 0..2 {
            c2.record(i * 5, 3.0, 2.0 * i as f64);
        }
        let m = mean_curve(&[c1, c2]);
        assert_eq!(m.val_loss, vec![0.0, 1.5]);
        assert_eq!(m.train_loss, vec![2.0, 2.0]);
    }
}
