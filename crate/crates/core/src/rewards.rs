//! Self-supervised temporal distance used as the goal-reaching reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{AdamConfig, HiddenActivation, OutputActivation, StepOutcome, Tape};
use crate::envs::{EnvSpec, GoalVec, InputScale};
use crate::error::{check_dim, Error, Result};
use crate::world_model::{ImaginedTrajectory, RolloutSource};
use crate::{AdamState, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Normalization constant; equals the imagination horizon.
    pub max_horizon: usize,
    pub pairs_per_trajectory: usize,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: HiddenActivation::Elu,
            lr: 3e-4,
            clip_norm: Some(100.0),
            max_horizon: 15,
            pairs_per_trajectory: 4,
        }
    }
}

/// `dnet(s, g) ∈ [0, 1]`: predicted steps from `s` to `g` over `max_horizon`.
#[derive(Debug, Clone)]
pub struct DistanceNet {
    pub net: Mlp,
    pub opt: AdamState,
    max_horizon: usize,
    pairs_per_trajectory: usize,
    state_scale: InputScale,
    goal_scale: InputScale,
    projection: Vec<usize>,
    train_steps: u64,
    skipped_steps: u64,
}

impl DistanceNet {
    pub fn new<R: Rng + ?Sized>(
        state_scale: InputScale,
        goal_scale: InputScale,
        projection: Vec<usize>,
        cfg: &DistanceConfig,
        rng: &mut R,
    ) -> Result<Self> {
        check_dim("goal scale", projection.len(), goal_scale.dim())?;
        if cfg.max_horizon == 0 {
            return Err(Error::Config(
                "distance max_horizon must be positive".into(),
            ));
        }
        let mut sizes = vec![state_scale.dim() + goal_scale.dim()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, cfg.activation, OutputActivation::Sigmoid, rng)?;
        let opt = AdamState::new(
            net.num_params(),
            AdamConfig {
                lr: cfg.lr,
                clip_norm: cfg.clip_norm,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            net,
            opt,
            max_horizon: cfg.max_horizon,
            pairs_per_trajectory: cfg.pairs_per_trajectory.max(1),
            state_scale,
            goal_scale,
            projection,
            train_steps: 0,
            skipped_steps: 0,
        })
    }

    pub fn for_env<R: Rng + ?Sized>(
        spec: &EnvSpec,
        cfg: &DistanceConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            spec.state_scale(),
            spec.goal_scale(),
            spec.goal_projection.clone(),
            cfg,
            rng,
        )
    }

    pub fn max_horizon(&self) -> usize {
        self.max_horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_scale.dim()
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_scale.dim()
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    fn inputs(&self, s: &[f64], g: &[f64], n: usize) -> Result<Vec<f64>> {
        let (sd, gd) = (self.state_dim(), self.goal_dim());
        check_dim("distance states", n * sd, s.len())?;
        check_dim("distance goals", n * gd, g.len())?;
        let mut x = Vec::with_capacity(n * (sd + gd));
        for i in 0..n {
            self.state_scale
                .extend_scaled(&s[i * sd..(i + 1) * sd], &mut x);
            self.goal_scale
                .extend_scaled(&g[i * gd..(i + 1) * gd], &mut x);
        }
        Ok(x)
    }

    pub fn forward_tape(&self, s: &[f64], g: &[f64], n: usize) -> Result<Tape<f64>> {
        let x = self.inputs(s, g, n)?;
        self.net.forward_tape(&x, n)
    }

    /// Gradient of `Σ upstream_i · dnet(s_i, g_i)` with respect to the states.
    pub fn backward_state(&self, tape: &Tape<f64>, upstream: &[f64]) -> Result<Vec<f64>> {
        let n = tape.batch();
        let (sd, gd) = (self.state_dim(), self.goal_dim());
        let dx = self
            .net
            .backward_tape(tape, upstream, None, true)?
            .expect("input gradient requested");
        let mut ds = Vec::with_capacity(n * sd);
        for row in dx.chunks_exact(sd + gd) {
            ds.extend(
                row[..sd]
                    .iter()
                    .zip(&self.state_scale.scale)
                    .map(|(d, s)| d * s),
            );
        }
        Ok(ds)
    }

    pub fn distance_batch(&self, s: &[f64], g: &[f64], n: usize) -> Result<Vec<f64>> {
        let x = self.inputs(s, g, n)?;
        self.net.forward_batch(&x, n)
    }

    pub fn distance(&self, s: &[f64], g: &[f64]) -> Result<f64> {
        Ok(self.distance_batch(s, g, 1)?[0])
    }

    /// `-dnet(s, g)`, in `[-1, 0]`.
    pub fn distance_reward(&self, s: &[f64], g: &GoalVec) -> Result<f64> {
        Ok(-self.distance(s, &g.vec)?)
    }

    /// Squared error of `dnet(s_i, g_i)` against `target_i`, averaged, and
    /// its parameter gradient.
    pub fn loss_and_grads(&self, s: &[f64], g: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = target.len();
        let tape = self.forward_tape(s, g, n)?;
        let diff: Vec<f64> = tape
            .output()
            .iter()
            .zip(target)
            .map(|(y, t)| y - t)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
        let up: Vec<f64> = diff.iter().map(|d| 2.0 * d / n as f64).collect();
        let mut grads = vec![0.0; self.net.num_params()];
        self.net
            .backward_tape(&tape, &up, Some(&mut grads), false)?;
        Ok((loss, grads))
    }

    /// One regression step on pairs `i ≤ j` drawn uniformly within each
    /// trajectory, target `(j - i) / max_horizon`. Returns `None` when there
    /// is nothing to train on.
    pub fn train_distance_step<R: Rng + ?Sized>(
        &mut self,
        trajectories: &[ImaginedTrajectory],
        rng: &mut R,
    ) -> Result<Option<f64>> {
        if let Some(t) = trajectories
            .iter()
            .find(|t| t.source != RolloutSource::GoalPolicy)
        {
            return Err(Error::Provenance(format!(
                "distance training needs goal-policy rollouts, got {:?}",
                t.source
            )));
        }
        let mut s = Vec::new();
        let mut g = Vec::new();
        let mut target = Vec::new();
        for traj in trajectories.iter().filter(|t| !t.states.is_empty()) {
            let len = traj.states.len();
            for _ in 0..self.pairs_per_trajectory {
                let (i, j) = sample_ordered_pair(len, rng);
                s.extend_from_slice(&traj.states[i]);
                g.extend(self.projection.iter().map(|&d| traj.states[j][d]));
                target.push(((j - i) as f64 / self.max_horizon as f64).min(1.0));
            }
        }
        if target.is_empty() {
            return Ok(None);
        }
        let (loss, grads) = self.loss_and_grads(&s, &g, &target)?;
        self.train_steps += 1;
        if !loss.is_finite() {
            self.skipped_steps += 1;
            return Ok(Some(loss));
        }
        if self.opt.step(self.net.params_mut(), &grads)? == StepOutcome::SkippedNonFinite {
            self.skipped_steps += 1;
        }
        Ok(Some(loss))
    }

    /// `dnet` over a grid of goal-space positions for a fixed goal, as CSV
    /// (row 0 is the bottom). Non-goal state dims come from `spec.start_state`.
    pub fn distance_field_csv(
        &self,
        spec: &EnvSpec,
        goal: &GoalVec,
        resolution: usize,
    ) -> Result<String> {
        let res = resolution.max(1);
        let space = spec.goal_space();
        let mut out = String::new();
        for row in 0..res {
            let y = space.lo[1] + (row as f64 + 0.5) / res as f64 * (space.hi[1] - space.lo[1]);
            let mut cells = Vec::with_capacity(res);
            for col in 0..res {
                let x = space.lo[0] + (col as f64 + 0.5) / res as f64 * (space.hi[0] - space.lo[0]);
                let mut s = spec.start_state.clone();
                s[spec.goal_projection[0]] = x;
                s[spec.goal_projection[1]] = y;
                cells.push(format!("{:.6}", self.distance(&s, &goal.vec)?));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Uniform over `{(i, j) : 0 ≤ i ≤ j < len}`.
pub fn sample_ordered_pair<R: Rng + ?Sized>(len: usize, rng: &mut R) -> (usize, usize) {
    assert!(len > 0, "empty trajectory");
    loop {
        let i = rng.gen_range(0..len);
        let j = rng.gen_range(0..len);
        if i <= j {
            return (i, j);
        }
    }
}
