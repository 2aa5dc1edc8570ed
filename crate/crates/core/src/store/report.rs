use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::predictor::CandidateReport;
use crate::sweep::{trimmed_mean_filter, RegimeLabel, SweepResult};

/// Outcome of the policy stages for one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub expert_return: f64,
    pub random_return: f64,
    pub dream_return: f64,
    pub normalized_score: Option<f64>,
    pub reward_f1: f64,
    pub termination_f1: f64,
    pub reward_candidates: Vec<CandidateReport>,
    pub termination_candidates: Vec<CandidateReport>,
    pub wm_best_val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub depths: Vec<usize>,
    pub mean_best: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Operational interpolation proxy per depth.
    pub interpolation_iter: Vec<Option<usize>>,
    pub regimes: BTreeMap<String, RegimeLabel>,
    /// Whether deeper models never hurt validation, per environment.
    pub never_hurts: BTreeMap<String, bool>,
}

impl SweepSummary {
    pub fn from_sweep(name: &str, sweep: &SweepResult, sat_threshold: f64) -> Result<Self, crate::sweep::SweepError> {
        Ok(Self {
            name: name.to_string(),
            depths: sweep.depths.clone(),
            mean_best: sweep.best_vals(),
            std_error: sweep.std_errors(),
            interpolation_iter: sweep.points.iter().map(|p| p.interpolation_iter).collect(),
            regimes: sweep.env_regimes(sat_threshold)?,
            never_hurts: sweep.never_hurts(),
        })
    }
}

/// Prediction quality against transfer score, one point per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub env: String,
    pub reward_f1: f64,
    pub termination_f1: f64,
    pub normalized_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub envs: BTreeMap<String, EnvReport>,
    pub sweeps: Vec<SweepSummary>,
    pub scatter: Vec<ScatterPoint>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Comma-separated columns with a header row; shorter columns leave blanks.
pub fn series_csv(columns: &[(&str, Vec<f64>)]) -> String {
    let mut out = columns.iter().map(|(h, _)| *h).collect::<Vec<_>>().join(",");
    out.push('\n');
    let rows = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for r in 0..rows {
        let cells: Vec<String> = columns
            .iter()
            .map(|(_, c)| c.get(r).map_or(String::new(), |v| format!("{v}")))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// A named polyline for [`line_plot_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal standalone SVG line chart. `log_y` plots `log10(y)` for
/// positive values.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let ty = |y: f64| if log_y { y.max(1e-12).log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (x, ty(y))))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let ylab = if log_y { format!("1e{fy:.1}") } else { format!("{fy:.3}") };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.0}</text>"#, sx(fx), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{ylab}</text>"#, m - 4.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 15.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| (x, ty(y)))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - m + 4.0 - 120.0,
            m + 14.0 * i as f64,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Best validation loss against depth, one line per environment.
pub fn loss_vs_depth_svg(name: &str, sweep: &SweepResult) -> String {
    let series: Vec<Series> = sweep
        .envs
        .iter()
        .filter_map(|e| sweep.project(e))
        .map(|r| Series {
            name: r.env.clone(),
            points: r.points.iter().map(|p| (p.depth as f64, p.mean_best)).collect(),
        })
        .collect();
    line_plot_svg(&format!("{name}: best validation loss"), "depth", "loss", &series, true)
}

/// Filtered validation curves per depth.
pub fn loss_vs_iteration_svg(name: &str, sweep: &SweepResult, trim: f64, window: usize) -> String {
    let series: Vec<Series> = sweep
        .points
        .iter()
        .map(|p| {
            let c = &p.mean_curve;
            let filtered = trimmed_mean_filter(&c.val_loss, trim, window).unwrap_or_else(|_| c.val_loss.clone());
            Series {
                name: format!("depth {}", p.depth),
                points: c.iterations.iter().map(|&i| i as f64).zip(filtered).collect(),
            }
        })
        .collect();
    line_plot_svg(&format!("{name}: validation loss"), "iteration", "loss", &series, true)
}
