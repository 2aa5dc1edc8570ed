//! Scaling-sweep methodology: loss curves, smoothing, regime labels and rank
//! statistics.

mod regime;
mod run;
mod stats;

pub use regime::{classify_regime, RegimeLabel, DEFAULT_SAT_THRESHOLD};
pub use run::{
    budget_mix_experiment, run_depth_sweep, DepthPoint, EnvPoint, MixResult, SweepResult, INTERPOLATION_LOSS,
};
pub use stats::{average_ranks, mean, pearson, spearman_rho, std_error, trimmed_mean_filter};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("empty series")]
    EmptySeries,
    #[error("correlation undefined: zero rank variance")]
    UndefinedCorrelation,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing dataset for {0}")]
    MissingDataset(String),
    #[error("budget share {share} exceeds the {available} transitions available for {env}")]
    BudgetExceeded {
        env: String,
        share: usize,
        available: usize,
    },
    #[error(transparent)]
    Wm(#[from] crate::wm::WmError),
}

/// Train/validation losses recorded at each evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    /// Iteration index of each evaluation.
    pub iterations: Vec<usize>,
    /// Mean training loss over the interval ending at each evaluation.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation loss per environment (unified training only).
    #[serde(default)]
    pub per_env_val: BTreeMap<String, Vec<f64>>,
    pub eval_interval: usize,
    pub best_val: f64,
    pub best_iter: usize,
    pub stopped_early: bool,
}

impl LossCurve {
    pub fn new(eval_interval: usize) -> Self {
        Self {
            eval_interval,
            best_val: f64::INFINITY,
            ..Self::default()
        }
    }

    /// Appends one evaluation; returns whether it improved on the best.
    pub fn record(&mut self, iteration: usize, train: f64, val: f64) -> bool {
        self.iterations.push(iteration);
        self.train_loss.push(train);
        self.val_loss.push(val);
        if val < self.best_val {
            self.best_val = val;
            self.best_iter = iteration;
            true
        } else {
            false
        }
    }

    /// Evaluations since the best one.
    pub fn evals_since_best(&self) -> usize {
        let idx = self
            .iterations
            .iter()
            .position(|&i| i == self.best_iter)
            .unwrap_or(0);
        self.iterations.len().saturating_sub(idx + 1)
    }
}
