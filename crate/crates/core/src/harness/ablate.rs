use std::fs;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explore::Variant;

use super::config::ExperimentConfig;
use super::metrics::{mean_ci95, regret_proxy, text_table};
use super::train::{RunSummary, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub final_success: f64,
    pub final_return: f64,
    pub task_relevant_fraction: f64,
    /// Against the best return of any run in the suite.
    pub regret_proxy: f64,
    /// `final_success` minus morefree's on the same seed (NaN without it).
    pub success_vs_morefree: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub j_best: f64,
}

pub const ABLATION_COLUMNS: [&str; 7] = [
    "variant",
    "seed",
    "final_success",
    "final_return",
    "task_relevant_fraction",
    "regret_proxy",
    "success_vs_morefree",
];

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", ABLATION_COLUMNS.join(","));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.3},{:.6}\n",
                r.variant,
                r.seed,
                r.final_success,
                r.final_return,
                r.task_relevant_fraction,
                r.regret_proxy,
                r.success_vs_morefree
            ));
        }
        out
    }

    pub fn variant_rows(&self, v: Variant) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.variant == v)
    }

    /// Per-variant means with 95% intervals.
    pub fn summary_text(&self) -> String {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        let fmt = |(m, h): (f64, f64)| format!("{m:.3} ± {h:.3}");
        let body: Vec<Vec<String>> = variants
            .iter()
            .map(|&v| {
                let col =
                    |f: fn(&AblationRow) -> f64| self.variant_rows(v).map(f).collect::<Vec<f64>>();
                vec![
                    v.to_string(),
                    col(|r| r.final_success).len().to_string(),
                    fmt(mean_ci95(&col(|r| r.final_success))),
                    fmt(mean_ci95(&col(|r| r.task_relevant_fraction))),
                    format!("{:.0}", mean_ci95(&col(|r| r.regret_proxy)).0),
                ]
            })
            .collect();
        text_table(
            &[
                "variant",
                "seeds",
                "final_success",
                "task_relevant",
                "regret_proxy",
            ],
            &body,
        )
    }
}

/// Train every `variant × seed` from `base` (outputs under
/// `<dir>/<variant>/seed_<k>`), then tabulate.
pub fn ablate(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    verbose: bool,
) -> Result<(AblationTable, Vec<RunSummary>)> {
    let mut runs = Vec::new();
    for &v in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.run.variant = v;
            cfg.run.seed = seed;
            cfg.output.dir = base
                .output
                .dir
                .join(v.as_str())
                .join(format!("seed_{seed}"));
            if verbose {
                eprintln!("== {v} seed {seed}");
            }
            let mut t = Trainer::with_output(cfg)?;
            t.verbose = verbose;
            t.run_to_end()?;
            let points: Vec<(u64, f64)> = t
                .rows()
                .iter()
                .map(|r| (r.env_step, r.eval_return))
                .collect();
            runs.push((v, seed, points, t.finish()?));
        }
    }
    let j_best = runs
        .iter()
        .flat_map(|r| r.2.iter().map(|p| p.1))
        .fold(0.0, f64::max);
    let morefree_success = |seed: u64| {
        runs.iter()
            .find(|r| r.0 == Variant::Morefree && r.1 == seed)
            .map_or(f64::NAN, |r| r.3.final_success)
    };
    let rows = runs
        .iter()
        .map(|(v, seed, points, s)| AblationRow {
            variant: *v,
            seed: *seed,
            final_success: s.final_success,
            final_return: s.final_return,
            task_relevant_fraction: s.task_relevant_fraction,
            regret_proxy: regret_proxy(points, j_best),
            success_vs_morefree: s.final_success - morefree_success(*seed),
        })
        .collect();
    let table = AblationTable { rows, j_best };
    let dir = &base.output.dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("ablation.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join("ablation.txt");
    fs::write(&txt, table.summary_text()).map_err(|e| Error::io(&txt, e))?;
    Ok((table, runs.into_iter().map(|r| r.3).collect()))
}
