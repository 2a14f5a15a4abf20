use std::fs;
use std::path::{Path, PathBuf};

use crate::buffer::ReplayBuffer;
use crate::envs::{EnvSpec, Rect};
use crate::error::{Error, Result};

use super::metrics::task_relevant_fraction;

/// Paths written by [`emit_heatmap`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub fraction: PathBuf,
}

/// Visitation counts of the goal-projected achieved states over the
/// workspace; row 0 is the bottom.
pub fn visitation(buffer: &ReplayBuffer, spec: &EnvSpec, resolution: usize) -> Vec<Vec<u64>> {
    let p = &spec.goal_projection;
    buffer.visitation_grid((p[0], p[1]), resolution, spec.workspace)
}

pub fn grid_csv(grid: &[Vec<u64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Plain graymap with `ln(1 + count)` scaled to 0..=255, top row = highest y.
pub fn grid_pgm(grid: &[Vec<u64>]) -> String {
    let h = grid.len();
    let w = grid.first().map_or(0, |r| r.len());
    let max = grid.iter().flatten().copied().max().unwrap_or(0);
    let denom = (1.0 + max as f64).ln();
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in grid.iter().rev() {
        let px: Vec<String> = row
            .iter()
            .map(|&c| {
                if max == 0 {
                    "0".to_string()
                } else {
                    ((1.0 + c as f64).ln() / denom * 255.0).round().to_string()
                }
            })
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    out
}

/// Write `<stem>.csv`, `<stem>.pgm` and `<stem>.fraction.txt` into `dir`.
pub fn emit_heatmap(
    buffer: &ReplayBuffer,
    spec: &EnvSpec,
    regions: &[Rect],
    resolution: usize,
    dir: &Path,
    stem: &str,
) -> Result<HeatmapFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = visitation(buffer, spec, resolution);
    let files = HeatmapFiles {
        csv: dir.join(format!("{stem}.csv")),
        pgm: dir.join(format!("{stem}.pgm")),
        fraction: dir.join(format!("{stem}.fraction.txt")),
    };
    let frac = task_relevant_fraction(buffer, &spec.goal_projection, regions);
    let mut side = format!(
        "task_relevant_fraction = {frac:.6}\ntransitions = {}\n",
        buffer.len()
    );
    for r in regions {
        side.push_str(&format!(
            "region = [{}, {}] x [{}, {}]\n",
            r.lo[0], r.hi[0], r.lo[1], r.hi[1]
        ));
    }
    for (path, text) in [
        (&files.csv, grid_csv(&grid)),
        (&files.pgm, grid_pgm(&grid)),
        (&files.fraction, side),
    ] {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
