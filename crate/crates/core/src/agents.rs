//! Goal-conditioned and exploration actor-critics trained purely in
//! imagination, and the mixture that picks imagination goals.
//!
//! Actors are trained with pathwise gradients of λ-returns through the mean
//! dynamics; critics regress the (stopped) λ-returns.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{
    lambda_returns, lambda_returns_vjp, AdamConfig, HiddenActivation, OutputActivation,
    StepOutcome, Tape,
};
use crate::buffer::ReplayBuffer;
use crate::envs::{EnvSpec, GoalVec, InputScale};
use crate::error::{check_dim, Error, Result};
use crate::rewards::{DistanceConfig, DistanceNet};
use crate::world_model::{
    BatchPolicy, DynamicsEnsemble, EnsembleConfig, EnsembleTape, ImaginedTrajectory, RolloutSource,
};
use crate::{AdamState, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Sample from the squashed Gaussian.
    Train,
    /// Squashed mean.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub clip_norm: Option<f64>,
    pub horizon: usize,
    pub batch: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Log-std produced by a zero raw output.
    pub init_log_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: HiddenActivation::Elu,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            clip_norm: Some(100.0),
            horizon: 15,
            batch: 64,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 3e-4,
            log_std_min: -5.0,
            log_std_max: 1.0,
            init_log_std: -0.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 || self.batch == 0 {
            return bad("imagination horizon and batch must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.log_std_min < self.init_log_std && self.init_log_std < self.log_std_max) {
            return bad("init_log_std must lie strictly inside the log-std range");
        }
        Ok(())
    }
}

/// Scaled, concatenated `[s, g]` rows.
#[derive(Debug, Clone, PartialEq)]
struct Inputs {
    state: InputScale,
    goal: Option<InputScale>,
}

impl Inputs {
    fn width(&self) -> usize {
        self.state.dim() + self.goal.as_ref().map_or(0, |g| g.dim())
    }

    fn build(&self, s: &[f64], g: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
        let sd = self.state.dim();
        check_dim("head states", n * sd, s.len())?;
        let mut x = Vec::with_capacity(n * self.width());
        match (&self.goal, g) {
            (Some(gs), Some(g)) => {
                let gd = gs.dim();
                check_dim("head goals", n * gd, g.len())?;
                for i in 0..n {
                    self.state.extend_scaled(&s[i * sd..(i + 1) * sd], &mut x);
                    gs.extend_scaled(&g[i * gd..(i + 1) * gd], &mut x);
                }
            }
            (None, _) => {
                for i in 0..n {
                    self.state.extend_scaled(&s[i * sd..(i + 1) * sd], &mut x);
                }
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "goal-conditioned head called without goals".into(),
                ))
            }
        }
        Ok(x)
    }

    /// Input gradient rows → state gradient rows.
    fn state_grad(&self, dx: &[f64], n: usize) -> Vec<f64> {
        let (sd, w) = (self.state.dim(), self.width());
        let mut ds = Vec::with_capacity(n * sd);
        for row in dx.chunks_exact(w) {
            ds.extend(row[..sd].iter().zip(&self.state.scale).map(|(d, s)| d * s));
        }
        ds
    }
}

/// Tanh-squashed diagonal Gaussian policy.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub opt: AdamState,
    inputs: Inputs,
    action_dim: usize,
    bound: f64,
    log_std_min: f64,
    log_std_max: f64,
    log_std_offset: f64,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_scale: InputScale,
        goal_scale: Option<InputScale>,
        action_dim: usize,
        bound: f64,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let inputs = Inputs {
            state: state_scale,
            goal: goal_scale,
        };
        let mut sizes = vec![inputs.width()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(2 * action_dim);
        let net = Mlp::new(&sizes, cfg.activation, OutputActivation::Identity, rng)?;
        let opt = AdamState::new(
            net.num_params(),
            AdamConfig {
                lr: cfg.actor_lr,
                clip_norm: cfg.clip_norm,
                ..AdamConfig::default()
            },
        );
        let span = cfg.log_std_max - cfg.log_std_min;
        let log_std_offset = (2.0 * (cfg.init_log_std - cfg.log_std_min) / span - 1.0).atanh();
        Ok(Self {
            net,
            opt,
            inputs,
            action_dim,
            bound,
            log_std_min: cfg.log_std_min,
            log_std_max: cfg.log_std_max,
            log_std_offset,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_goal_conditioned(&self) -> bool {
        self.inputs.goal.is_some()
    }

    /// Soft clamp of a raw output into `[log_std_min, log_std_max]`, with its
    /// derivative.
    fn log_std(&self, raw: f64) -> (f64, f64) {
        let half = 0.5 * (self.log_std_max - self.log_std_min);
        let t = (raw + self.log_std_offset).tanh();
        (self.log_std_min + half * (t + 1.0), half * (1.0 - t * t))
    }

    pub fn forward_tape(&self, s: &[f64], g: Option<&[f64]>, n: usize) -> Result<Tape<f64>> {
        let x = self.inputs.build(s, g, n)?;
        self.net.forward_tape(&x, n)
    }

    /// Per-row `(mean, log_std)` of the pre-squash Gaussian.
    pub fn distribution(&self, s: &[f64], g: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.inputs.build(s, g, 1)?;
        let out = self.net.forward(&x)?;
        let a = self.action_dim;
        let log_std = out[a..].iter().map(|&r| self.log_std(r).0).collect();
        Ok((out[..a].to_vec(), log_std))
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        g: Option<&[f64]>,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let (mean, log_std) = self.distribution(s, g)?;
        Ok(mean
            .iter()
            .zip(&log_std)
            .map(|(&m, &ls)| {
                let u = match mode {
                    ActMode::Eval => m,
                    ActMode::Train => m + ls.exp() * rng.sample::<f64, _>(StandardNormal),
                };
                self.bound * u.tanh()
            })
            .collect())
    }

    /// Squashed means for a batch of rows.
    pub fn mean_actions(&self, s: &[f64], g: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
        let x = self.inputs.build(s, g, n)?;
        let out = self.net.forward_batch(&x, n)?;
        let a = self.action_dim;
        Ok(out
            .chunks_exact(2 * a)
            .flat_map(|row| row[..a].iter().map(|m| self.bound * m.tanh()))
            .collect())
    }
}

/// Deterministic batch view of a policy for imagination.
pub struct MeanPolicy<'a>(pub &'a GaussianPolicy);

impl BatchPolicy for MeanPolicy<'_> {
    fn act_batch(&mut self, states: &[f64], goals: Option<&[f64]>, n: usize) -> Vec<f64> {
        let g = if self.0.is_goal_conditioned() {
            goals
        } else {
            None
        };
        self.0
            .mean_actions(states, g, n)
            .expect("policy input dimensions fixed at construction")
    }
}

#[derive(Debug, Clone)]
pub struct ValueNet {
    pub net: Mlp,
    pub opt: AdamState,
    inputs: Inputs,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(
        state_scale: InputScale,
        goal_scale: Option<InputScale>,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let inputs = Inputs {
            state: state_scale,
            goal: goal_scale,
        };
        let mut sizes = vec![inputs.width()];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, cfg.activation, OutputActivation::Identity, rng)?;
        let opt = AdamState::new(
            net.num_params(),
            AdamConfig {
                lr: cfg.critic_lr,
                clip_norm: cfg.clip_norm,
                ..AdamConfig::default()
            },
        );
        Ok(Self { net, opt, inputs })
    }

    pub fn forward_tape(&self, s: &[f64], g: Option<&[f64]>, n: usize) -> Result<Tape<f64>> {
        let x = self.inputs.build(s, g, n)?;
        self.net.forward_tape(&x, n)
    }

    pub fn values(&self, s: &[f64], g: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
        let x = self.inputs.build(s, g, n)?;
        self.net.forward_batch(&x, n)
    }

    /// Mean squared error to fixed targets over rows with nonzero weight.
    pub fn critic_loss(
        &self,
        s: &[f64],
        g: Option<&[f64]>,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<f64> {
        let v = self.values(s, g, targets.len())?;
        let wsum: f64 = weights.iter().sum();
        if wsum == 0.0 {
            return Ok(0.0);
        }
        Ok(v.iter()
            .zip(targets)
            .zip(weights)
            .map(|((v, t), w)| w * (v - t) * (v - t))
            .sum::<f64>()
            / wsum)
    }
}

/// Per-step reward used inside an imagined rollout.
#[derive(Clone, Copy)]
pub enum ImagReward<'a> {
    /// `r_t = -dnet(s_{t+1}, g)`.
    Distance(&'a DistanceNet),
    /// `r_t = disagreement(s_t, a_t)`.
    Disagreement,
}

/// Frozen inputs of one imagination step: starts, goals and the
/// reparameterization noise (`horizon x n x action_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagBatch {
    pub n: usize,
    pub horizon: usize,
    pub starts: Vec<f64>,
    pub goals: Option<Vec<f64>>,
    pub noise: Vec<f64>,
}

impl ImagBatch {
    pub fn sample<R: Rng + ?Sized>(
        starts: Vec<Vec<f64>>,
        goals: Option<Vec<Vec<f64>>>,
        horizon: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Self {
        let n = starts.len();
        let noise = (0..horizon * n * action_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self {
            n,
            horizon,
            starts: starts.into_iter().flatten().collect(),
            goals: goals.map(|g| g.into_iter().flatten().collect()),
            noise,
        }
    }

    /// Goal rows repeated `times` (stacked time-major).
    fn tiled_goals(&self, times: usize) -> Option<Vec<f64>> {
        self.goals.as_ref().map(|g| {
            let mut out = Vec::with_capacity(g.len() * times);
            for _ in 0..times {
                out.extend_from_slice(g);
            }
            out
        })
    }
}

/// Everything recorded by one imagined rollout.
struct Rollout {
    n: usize,
    h: usize,
    /// `h + 1` blocks of `n x state_dim`.
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    pol_tapes: Vec<Tape<f64>>,
    /// Pre-squash samples `u = μ + σ ε` and their noise part `σ ε`.
    pre: Vec<Vec<f64>>,
    eps_sigma: Vec<Vec<f64>>,
    log_std: Vec<Vec<f64>>,
    log_std_slope: Vec<Vec<f64>>,
    ens_tapes: Vec<EnsembleTape>,
    dist_tape: Option<Tape<f64>>,
    val_tape: Tape<f64>,
    rewards: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    returns: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Scalars reported by one actor-critic update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Mean summed log-std of the pre-squash Gaussian.
    pub entropy: f64,
    pub mean_reward: f64,
    pub mean_return: f64,
    /// Rows dropped by the divergence guard.
    pub diverged: usize,
    pub skipped: bool,
}

/// See [`ActorCritic::critic_targets`].
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTargets {
    pub states: Vec<f64>,
    pub goals: Option<Vec<f64>>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

/// A policy and its value function.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub cfg: HeadConfig,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(
        state_scale: InputScale,
        goal_scale: Option<InputScale>,
        action_dim: usize,
        bound: f64,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            policy: GaussianPolicy::new(
                state_scale.clone(),
                goal_scale.clone(),
                action_dim,
                bound,
                cfg,
                rng,
            )?,
            value: ValueNet::new(state_scale, goal_scale, cfg, rng)?,
            cfg: cfg.clone(),
        })
    }

    fn rollout(
        &self,
        ens: &DynamicsEnsemble,
        reward: ImagReward<'_>,
        batch: &ImagBatch,
        divergence_limit: f64,
    ) -> Result<Rollout> {
        let (n, h) = (batch.n, batch.horizon);
        let d = ens.state_dim();
        let a_dim = self.policy.action_dim;
        check_dim("imagination noise", h * n * a_dim, batch.noise.len())?;
        if self.policy.is_goal_conditioned() != batch.goals.is_some() {
            return Err(Error::Config("goal presence must match the head".into()));
        }
        let goals = batch.goals.as_deref();
        let mut states = vec![batch.starts.clone()];
        let mut weights: Vec<f64> = batch
            .starts
            .chunks_exact(d)
            .map(|s| {
                if row_ok(s, divergence_limit) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut actions = Vec::with_capacity(h);
        let mut pol_tapes = Vec::with_capacity(h);
        let mut pre = Vec::with_capacity(h);
        let mut eps_sigma = Vec::with_capacity(h);
        let mut log_std = Vec::with_capacity(h);
        let mut log_std_slope = Vec::with_capacity(h);
        let mut ens_tapes = Vec::with_capacity(h);
        for t in 0..h {
            let s = &states[t];
            let tape = self.policy.forward_tape(s, goals, n)?;
            let noise = &batch.noise[t * n * a_dim..(t + 1) * n * a_dim];
            let mut act = Vec::with_capacity(n * a_dim);
            let mut us = Vec::with_capacity(n * a_dim);
            let mut es = Vec::with_capacity(n * a_dim);
            let mut ls = Vec::with_capacity(n * a_dim);
            let mut slope = Vec::with_capacity(n * a_dim);
            for (row, eps) in tape
                .output()
                .chunks_exact(2 * a_dim)
                .zip(noise.chunks_exact(a_dim))
            {
                for j in 0..a_dim {
                    let (l, dl) = self.policy.log_std(row[a_dim + j]);
                    let e = l.exp() * eps[j];
                    let u = row[j] + e;
                    act.push(self.policy.bound * u.tanh());
                    us.push(u);
                    es.push(e);
                    ls.push(l);
                    slope.push(dl);
                }
            }
            let et = ens.forward_tape(s, &act, n)?;
            let mut next = et.next_states.clone();
            for i in 0..n {
                let row = &mut next[i * d..(i + 1) * d];
                if weights[i] == 0.0 || !row_ok(row, divergence_limit) {
                    weights[i] = 0.0;
                    row.copy_from_slice(&s[i * d..(i + 1) * d]);
                }
            }
            pol_tapes.push(tape);
            actions.push(act);
            pre.push(us);
            eps_sigma.push(es);
            log_std.push(ls);
            log_std_slope.push(slope);
            ens_tapes.push(et);
            states.push(next);
        }

        let (dist_tape, rewards) = match reward {
            ImagReward::Distance(dnet) => {
                let s: Vec<f64> = states[1..].concat();
                let g = batch
                    .tiled_goals(h)
                    .ok_or_else(|| Error::Config("distance reward needs goals".into()))?;
                let tape = dnet.forward_tape(&s, &g, h * n)?;
                let r: Vec<Vec<f64>> = tape
                    .output()
                    .chunks_exact(n)
                    .map(|c| c.iter().map(|v| -v).collect())
                    .collect();
                (Some(tape), r)
            }
            ImagReward::Disagreement => (
                None,
                ens_tapes.iter().map(|t| t.disagreement.clone()).collect(),
            ),
        };
        let all: Vec<f64> = states.concat();
        let val_tape =
            self.value
                .forward_tape(&all, batch.tiled_goals(h + 1).as_deref(), (h + 1) * n)?;
        let values: Vec<Vec<f64>> = val_tape
            .output()
            .chunks_exact(n)
            .map(|c| c.to_vec())
            .collect();

        let mut returns = vec![vec![0.0; n]; h];
        let (gamma, lambda) = (self.cfg.gamma, self.cfg.lambda);
        for i in 0..n {
            let r: Vec<f64> = (0..h).map(|t| rewards[t][i]).collect();
            let v: Vec<f64> = (0..=h).map(|t| values[t][i]).collect();
            for (t, ret) in lambda_returns(&r, &v, gamma, lambda)?
                .into_iter()
                .enumerate()
            {
                returns[t][i] = ret;
            }
        }
        Ok(Rollout {
            n,
            h,
            states,
            actions,
            pol_tapes,
            pre,
            eps_sigma,
            log_std,
            log_std_slope,
            ens_tapes,
            dist_tape,
            val_tape,
            rewards,
            values,
            returns,
            weights,
        })
    }

    fn report(&self, ro: &Rollout) -> StepReport {
        let wsum: f64 = ro.weights.iter().sum();
        let diverged = ro.weights.iter().filter(|&&w| w == 0.0).count();
        if wsum == 0.0 {
            return StepReport {
                diverged,
                skipped: true,
                ..StepReport::default()
            };
        }
        let a_dim = self.policy.action_dim;
        let norm = wsum * ro.h as f64;
        let (mut ret, mut rew, mut ent, mut critic) = (0.0, 0.0, 0.0, 0.0);
        for t in 0..ro.h {
            for i in 0..ro.n {
                let w = ro.weights[i];
                if w == 0.0 {
                    continue;
                }
                ret += w * ro.returns[t][i];
                rew += w * ro.rewards[t][i];
                ent += w * ro.log_std[t][i * a_dim..(i + 1) * a_dim]
                    .iter()
                    .sum::<f64>();
                let e = ro.values[t][i] - ro.returns[t][i];
                critic += w * e * e;
            }
        }
        StepReport {
            actor_loss: -(ret + self.cfg.entropy_coef * ent) / norm,
            critic_loss: critic / norm,
            entropy: ent / norm,
            mean_reward: rew / norm,
            mean_return: ret / norm,
            diverged,
            skipped: false,
        }
    }

    /// Actor objective on frozen inputs:
    /// `-mean_{i,t} R_t - η mean_{i,t} Σ_a log σ`.
    pub fn actor_loss(
        &self,
        ens: &DynamicsEnsemble,
        reward: ImagReward<'_>,
        batch: &ImagBatch,
        divergence_limit: f64,
    ) -> Result<f64> {
        let ro = self.rollout(ens, reward, batch, divergence_limit)?;
        Ok(self.report(&ro).actor_loss)
    }

    /// Pathwise gradient of [`actor_loss`](Self::actor_loss) with respect to
    /// the policy parameters. Other networks are read-only.
    fn actor_grads(
        &self,
        ro: &Rollout,
        ens: &DynamicsEnsemble,
        reward: ImagReward<'_>,
    ) -> Result<Vec<f64>> {
        let (n, h) = (ro.n, ro.h);
        let d = ens.state_dim();
        let a_dim = self.policy.action_dim;
        let wsum: f64 = ro.weights.iter().sum();
        let norm = wsum * h as f64;

        // ∂L/∂r_t and ∂L/∂v_t per row, time-major.
        let mut d_r = vec![vec![0.0; n]; h];
        let mut d_v = vec![vec![0.0; n]; h + 1];
        for i in 0..n {
            if ro.weights[i] == 0.0 {
                continue;
            }
            let c = vec![-ro.weights[i] / norm; h];
            let (gr, gv) = lambda_returns_vjp(&c, self.cfg.gamma, self.cfg.lambda);
            for t in 0..h {
                d_r[t][i] = gr[t];
            }
            for t in 0..=h {
                d_v[t][i] = gv[t];
            }
        }

        let val_up: Vec<f64> = d_v.concat();
        let dx = self
            .value
            .net
            .backward_tape(&ro.val_tape, &val_up, None, true)?
            .expect("input gradient requested");
        let ds_value = self.value.inputs.state_grad(&dx, (h + 1) * n);
        let ds_dist = match (reward, &ro.dist_tape) {
            (ImagReward::Distance(dnet), Some(tape)) => {
                let up: Vec<f64> = d_r.iter().flatten().map(|g| -g).collect();
                Some(dnet.backward_state(tape, &up)?)
            }
            _ => None,
        };

        let mut grads = vec![0.0; self.policy.net.num_params()];
        let mut gs = ds_value[h * n * d..].to_vec();
        for t in (0..h).rev() {
            if let Some(dd) = &ds_dist {
                for (g, v) in gs.iter_mut().zip(&dd[t * n * d..(t + 1) * n * d]) {
                    *g += v;
                }
            }
            let d_dis = match reward {
                ImagReward::Disagreement => Some(d_r[t].as_slice()),
                ImagReward::Distance(_) => None,
            };
            let (mut gs_t, ga) = ens.backward(&ro.ens_tapes[t], &gs, d_dis)?;
            for i in 0..n {
                if ro.weights[i] == 0.0 {
                    gs_t[i * d..(i + 1) * d].iter_mut().for_each(|g| *g = 0.0);
                }
            }
            for (g, v) in gs_t.iter_mut().zip(&ds_value[t * n * d..(t + 1) * n * d]) {
                *g += v;
            }

            let mut up = vec![0.0; n * 2 * a_dim];
            for i in 0..n {
                let w = ro.weights[i];
                if w == 0.0 {
                    continue;
                }
                for j in 0..a_dim {
                    let k = i * a_dim + j;
                    let th = ro.pre[t][k].tanh();
                    let gu = ga[k] * self.policy.bound * (1.0 - th * th);
                    let g_log_std = gu * ro.eps_sigma[t][k] - self.cfg.entropy_coef * w / norm;
                    up[i * 2 * a_dim + j] = gu;
                    up[i * 2 * a_dim + a_dim + j] = g_log_std * ro.log_std_slope[t][k];
                }
            }
            let dx =
                self.policy
                    .net
                    .backward_tape(&ro.pol_tapes[t], &up, Some(&mut grads), t > 0)?;
            if let Some(dx) = dx {
                for (g, v) in gs_t.iter_mut().zip(self.policy.inputs.state_grad(&dx, n)) {
                    *g += v;
                }
            }
            gs = gs_t;
        }
        Ok(grads)
    }

    /// Critic gradient toward the stopped λ-returns, reusing the rollout tape.
    fn critic_grads(&self, ro: &Rollout) -> Result<Vec<f64>> {
        let (n, h) = (ro.n, ro.h);
        let norm = ro.weights.iter().sum::<f64>() * h as f64;
        let mut up = vec![0.0; (h + 1) * n];
        for t in 0..h {
            for i in 0..n {
                let w = ro.weights[i];
                if w != 0.0 {
                    up[t * n + i] = 2.0 * w * (ro.values[t][i] - ro.returns[t][i]) / norm;
                }
            }
        }
        let mut grads = vec![0.0; self.value.net.num_params()];
        self.value
            .net
            .backward_tape(&ro.val_tape, &up, Some(&mut grads), false)?;
        Ok(grads)
    }

    /// Parameter gradients of the actor and critic losses on frozen inputs.
    pub fn gradients(
        &self,
        ens: &DynamicsEnsemble,
        reward: ImagReward<'_>,
        batch: &ImagBatch,
        divergence_limit: f64,
    ) -> Result<(StepReport, Vec<f64>, Vec<f64>)> {
        let ro = self.rollout(ens, reward, batch, divergence_limit)?;
        let report = self.report(&ro);
        if report.skipped {
            return Ok((
                report,
                vec![0.0; self.policy.net.num_params()],
                vec![0.0; self.value.net.num_params()],
            ));
        }
        let ga = self.actor_grads(&ro, ens, reward)?;
        let gc = self.critic_grads(&ro)?;
        Ok((report, ga, gc))
    }

    /// Critic regression data of one rollout: the first `h` imagined states
    /// (time-major), their tiled goals, stopped λ-returns and row weights, in
    /// the layout [`ValueNet::critic_loss`] takes.
    pub fn critic_targets(
        &self,
        ens: &DynamicsEnsemble,
        reward: ImagReward<'_>,
        batch: &ImagBatch,
        divergence_limit: f64,
    ) -> Result<CriticTargets> {
        let ro = self.rollout(ens, reward, batch, divergence_limit)?;
        Ok(CriticTargets {
            states: ro.states[..ro.h].concat(),
            goals: batch.tiled_goals(ro.h),
            targets: ro.returns.concat(),
            weights: (0..ro.h).flat_map(|_| ro.weights.iter().copied()).collect(),
        })
    }

    /// One actor and one critic step. Returns the report and the imagined
    /// trajectories of the rows that stayed within the divergence limit.
    pub fn train_step(
        &mut self,
        ens: &DynamicsEnsemble,
        reward: ImagReward<'_>,
        batch: &ImagBatch,
        divergence_limit: f64,
        source: RolloutSource,
        goals: Option<&[GoalVec]>,
    ) -> Result<(StepReport, Vec<ImaginedTrajectory>)> {
        let ro = self.rollout(ens, reward, batch, divergence_limit)?;
        let mut report = self.report(&ro);
        let trajs =
            collect_trajectories(&ro, ens.state_dim(), self.policy.action_dim, source, goals);
        if report.skipped {
            return Ok((report, trajs));
        }
        if !(report.actor_loss.is_finite() && report.critic_loss.is_finite()) {
            report.skipped = true;
            return Ok((report, trajs));
        }
        let ga = self.actor_grads(&ro, ens, reward)?;
        let gc = self.critic_grads(&ro)?;
        let a = self.policy.opt.step(self.policy.net.params_mut(), &ga)?;
        let c = self.value.opt.step(self.value.net.params_mut(), &gc)?;
        report.skipped = a == StepOutcome::SkippedNonFinite || c == StepOutcome::SkippedNonFinite;
        Ok((report, trajs))
    }
}

fn row_ok(row: &[f64], limit: f64) -> bool {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    norm <= limit
}

fn collect_trajectories(
    ro: &Rollout,
    d: usize,
    a_dim: usize,
    source: RolloutSource,
    goals: Option<&[GoalVec]>,
) -> Vec<ImaginedTrajectory> {
    (0..ro.n)
        .filter(|&i| ro.weights[i] != 0.0)
        .map(|i| ImaginedTrajectory {
            states: ro
                .states
                .iter()
                .map(|s| s[i * d..(i + 1) * d].to_vec())
                .collect(),
            actions: ro
                .actions
                .iter()
                .map(|a| a[i * a_dim..(i + 1) * a_dim].to_vec())
                .collect(),
            rewards: ro.rewards.iter().map(|r| r[i]).collect(),
            goal: goals.map(|g| g[i].clone()),
            source,
            truncated: false,
        })
        .collect()
}

/// Where an imagination goal was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GoalSource {
    Eval,
    Initial,
    Buffer,
}

/// Weights `(α/2, α/2, 1 - α)` over evaluation, initial-state and buffer goals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImaginationGoalMixture {
    pub alpha: f64,
}

impl ImaginationGoalMixture {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.alpha / 2.0, self.alpha / 2.0, 1.0 - self.alpha]
    }

    pub fn draw_source<R: Rng + ?Sized>(&self, rng: &mut R) -> GoalSource {
        let u: f64 = rng.gen();
        if u < self.alpha / 2.0 {
            GoalSource::Eval
        } else if u < self.alpha {
            GoalSource::Initial
        } else {
            GoalSource::Buffer
        }
    }

    /// `n` goals with their sources. With an empty buffer, buffer draws fall
    /// back to an even split of task goals.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        spec: &EnvSpec,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Vec<(GoalVec, GoalSource)> {
        (0..n)
            .map(|_| {
                let mut src = self.draw_source(rng);
                if src == GoalSource::Buffer && buffer.is_empty() {
                    src = if rng.gen::<bool>() {
                        GoalSource::Eval
                    } else {
                        GoalSource::Initial
                    };
                }
                let g = match src {
                    GoalSource::Eval => spec.sample_eval_goal(rng),
                    GoalSource::Initial => spec.sample_initial_goal(rng),
                    GoalSource::Buffer => buffer
                        .sample_states_as_goals(1, spec, rng)
                        .expect("buffer checked non-empty")
                        .remove(0),
                };
                (g, src)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub ensemble: EnsembleConfig,
    pub distance: DistanceConfig,
    pub goal: HeadConfig,
    pub explore: HeadConfig,
    pub model_batch: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            distance: DistanceConfig::default(),
            goal: HeadConfig::default(),
            explore: HeadConfig::default(),
            model_batch: 128,
        }
    }
}

/// Losses and diagnostics of one train cycle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub model_losses: Vec<f64>,
    pub distance_loss: Option<f64>,
    pub goal: StepReport,
    pub explore: StepReport,
    /// Imagination goal counts: eval, initial, buffer.
    pub goal_sources: [usize; 3],
}

/// All learned state: dynamics, distance, and both actor-critics.
#[derive(Debug, Clone)]
pub struct Agent {
    pub ensemble: DynamicsEnsemble,
    pub dnet: DistanceNet,
    pub goal: ActorCritic,
    pub explore: ActorCritic,
    pub cfg: AgentConfig,
    divergence_limit: f64,
    recent_goal_rollouts: Vec<ImaginedTrajectory>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, cfg: &AgentConfig, rng: &mut R) -> Result<Self> {
        let ensemble = DynamicsEnsemble::new(spec.state_dim, spec.action_dim, &cfg.ensemble, rng)?;
        let dnet = DistanceNet::for_env(spec, &cfg.distance, rng)?;
        let goal = ActorCritic::new(
            spec.state_scale(),
            Some(spec.goal_scale()),
            spec.action_dim,
            spec.action_bound,
            &cfg.goal,
            rng,
        )?;
        let explore = ActorCritic::new(
            spec.state_scale(),
            None,
            spec.action_dim,
            spec.action_bound,
            &cfg.explore,
            rng,
        )?;
        Ok(Self {
            ensemble,
            dnet,
            goal,
            explore,
            cfg: cfg.clone(),
            divergence_limit: 10.0 * spec.workspace.diameter(),
            recent_goal_rollouts: Vec::new(),
        })
    }

    pub fn divergence_limit(&self) -> f64 {
        self.divergence_limit
    }

    /// Goal-policy rollouts from the last cycle, used by the next distance step.
    pub fn recent_goal_rollouts(&self) -> &[ImaginedTrajectory] {
        &self.recent_goal_rollouts
    }

    /// One model step, one distance step, one goal-policy step and one
    /// exploration-policy step.
    pub fn train_cycle<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        spec: &EnvSpec,
        mixture: &ImaginationGoalMixture,
        rng: &mut R,
    ) -> Result<CycleReport> {
        let batch = buffer.sample_batch(self.cfg.model_batch, rng)?;
        let model_losses = self.ensemble.train_model_step(&batch)?;
        let distance_loss = self
            .dnet
            .train_distance_step(&self.recent_goal_rollouts, rng)?;

        let b = self.cfg.goal.batch;
        let starts = buffer.sample_states(b, rng)?;
        let drawn = mixture.sample(b, spec, buffer, rng);
        let mut goal_sources = [0usize; 3];
        for (_, s) in &drawn {
            goal_sources[*s as usize] += 1;
        }
        let goals: Vec<GoalVec> = drawn.into_iter().map(|(g, _)| g).collect();
        let gb = ImagBatch::sample(
            starts,
            Some(goals.iter().map(|g| g.vec.clone()).collect()),
            self.cfg.goal.horizon,
            spec.action_dim,
            rng,
        );
        let (goal, trajs) = self.goal.train_step(
            &self.ensemble,
            ImagReward::Distance(&self.dnet),
            &gb,
            self.divergence_limit,
            RolloutSource::GoalPolicy,
            Some(&goals),
        )?;
        self.recent_goal_rollouts = trajs;

        let starts = buffer.sample_states(self.cfg.explore.batch, rng)?;
        let eb = ImagBatch::sample(starts, None, self.cfg.explore.horizon, spec.action_dim, rng);
        let (explore, _) = self.explore.train_step(
            &self.ensemble,
            ImagReward::Disagreement,
            &eb,
            self.divergence_limit,
            RolloutSource::ExplorePolicy,
            None,
        )?;
        Ok(CycleReport {
            model_losses,
            distance_loss,
            goal,
            explore,
            goal_sources,
        })
    }

    /// Hash of every learned parameter, optimizer counter and normalizer.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut put = |xs: &[f64]| {
            xs.len().hash(&mut h);
            for x in xs {
                x.to_bits().hash(&mut h);
            }
        };
        for m in self.ensemble.members() {
            put(m.params());
        }
        put(self.ensemble.input_normalizer().mean());
        put(self.ensemble.input_normalizer().var());
        put(self.ensemble.delta_normalizer().mean());
        put(self.ensemble.delta_normalizer().var());
        put(self.dnet.net.params());
        put(self.goal.policy.net.params());
        put(self.goal.value.net.params());
        put(self.explore.policy.net.params());
        put(self.explore.value.net.params());
        let steps = [
            self.ensemble.train_steps(),
            self.dnet.opt.step_count(),
            self.goal.policy.opt.step_count(),
            self.goal.value.opt.step_count(),
            self.explore.policy.opt.step_count(),
            self.explore.value.opt.step_count(),
        ];
        steps.hash(&mut h);
        h.finish()
    }
}
