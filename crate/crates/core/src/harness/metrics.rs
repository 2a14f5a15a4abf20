use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::envs::Rect;

pub const METRICS_VERSION: &str = "# morefree-metrics v1";

pub const METRICS_COLUMNS: [&str; 17] = [
    "env_step",
    "eval_success",
    "eval_return",
    "task_relevant_fraction",
    "model_loss",
    "distance_loss",
    "goal_actor_loss",
    "goal_critic_loss",
    "goal_entropy",
    "explore_actor_loss",
    "explore_critic_loss",
    "explore_entropy",
    "eval_goal_disagreement",
    "buffer_size",
    "train_cycles",
    "resets",
    "cumulative_regret_proxy",
];

/// One evaluation point. Loss columns average the train cycles since the
/// previous row and are `NaN` when there were none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: u64,
    pub eval_success: f64,
    pub eval_return: f64,
    pub task_relevant_fraction: f64,
    pub model_loss: f64,
    pub distance_loss: f64,
    pub goal_actor_loss: f64,
    pub goal_critic_loss: f64,
    pub goal_entropy: f64,
    pub explore_actor_loss: f64,
    pub explore_critic_loss: f64,
    pub explore_entropy: f64,
    pub eval_goal_disagreement: f64,
    pub buffer_size: usize,
    pub train_cycles: u64,
    pub resets: usize,
    /// Regret proxy up to this row against the best return seen so far.
    pub cumulative_regret_proxy: f64,
}

impl MetricsRow {
    fn values(&self) -> [String; 17] {
        let f = |v: f64| format!("{v:.9e}");
        [
            self.env_step.to_string(),
            f(self.eval_success),
            f(self.eval_return),
            f(self.task_relevant_fraction),
            f(self.model_loss),
            f(self.distance_loss),
            f(self.goal_actor_loss),
            f(self.goal_critic_loss),
            f(self.goal_entropy),
            f(self.explore_actor_loss),
            f(self.explore_critic_loss),
            f(self.explore_entropy),
            f(self.eval_goal_disagreement),
            self.buffer_size.to_string(),
            self.train_cycles.to_string(),
            self.resets.to_string(),
            f(self.cumulative_regret_proxy),
        ]
    }
}

pub fn metrics_header() -> String {
    format!("{METRICS_VERSION}\n{}\n", METRICS_COLUMNS.join(","))
}

pub fn metrics_line(row: &MetricsRow) -> String {
    format!("{}\n", row.values().join(","))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = metrics_header();
    for r in rows {
        out.push_str(&metrics_line(r));
    }
    out
}

/// Parse a metrics CSV written by [`metrics_csv`] back into
/// `(env_step, eval_success, eval_return)` triples.
pub fn parse_metrics_csv(text: &str) -> Vec<(u64, f64, f64)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("env_step"))
        .filter_map(|l| {
            let mut it = l.split(',');
            let step = it.next()?.parse().ok()?;
            let succ = it.next()?.parse().ok()?;
            let ret = it.next()?.parse().ok()?;
            Some((step, succ, ret))
        })
        .collect()
}

/// `Σ_k (j_best - J_k) Δ_k` with `Δ_k` the env steps since the previous
/// evaluation point (the first point counts from step 0).
pub fn regret_proxy(points: &[(u64, f64)], j_best: f64) -> f64 {
    let mut prev = 0;
    let mut total = 0.0;
    for &(step, j) in points {
        total += (j_best - j) * step.saturating_sub(prev) as f64;
        prev = step;
    }
    total
}

/// Fraction of stored achieved states whose `projection` coordinates lie in
/// any of `regions`.
pub fn task_relevant_fraction(
    buffer: &ReplayBuffer,
    projection: &[usize],
    regions: &[Rect],
) -> f64 {
    if buffer.is_empty() || regions.is_empty() {
        return 0.0;
    }
    let hits = buffer
        .iter()
        .filter(|t| {
            let p = [t.s_next[projection[0]], t.s_next[projection[1]]];
            regions.iter().any(|r| r.contains(p))
        })
        .count();
    hits as f64 / buffer.len() as f64
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Render rows as an aligned plain-text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for r in rows {
        line(r.iter().map(|s| s.as_str()).collect(), &mut out);
    }
    out
}
