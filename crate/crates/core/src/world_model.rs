//! Learned dynamics: an ensemble of residual MLPs over normalized `(s, a)`.
//!
//! Rollouts use the ensemble mean; the across-member variance of the
//! normalized predictions is the intrinsic exploration signal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{AdamConfig, HiddenActivation, OutputActivation, StepOutcome, Tape};
use crate::buffer::Transition;
use crate::envs::GoalVec;
use crate::error::{check_dim, Error, Result};
use crate::{AdamState, Mlp, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Floor on normalizer standard deviations.
    pub min_std: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: vec![128, 128],
            activation: HiddenActivation::Elu,
            lr: 1e-3,
            clip_norm: Some(100.0),
            min_std: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsEnsemble {
    members: Vec<Mlp>,
    opts: Vec<AdamState>,
    input_norm: Normalizer,
    delta_norm: Normalizer,
    state_dim: usize,
    action_dim: usize,
    train_steps: u64,
    skipped_steps: u64,
}

/// Recorded forward pass of the whole ensemble on a batch.
#[derive(Debug, Clone)]
pub struct EnsembleTape {
    batch: usize,
    member_tapes: Vec<Tape<f64>>,
    /// Mean normalized delta, `batch x state_dim`.
    mean_norm: Vec<f64>,
    pub next_states: Vec<f64>,
    /// Per-row disagreement.
    pub disagreement: Vec<f64>,
}

impl DynamicsEnsemble {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        cfg: &EnsembleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.members < 2 {
            return Err(Error::Config("ensemble needs at least two members".into()));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(state_dim);
        let members = (0..cfg.members)
            .map(|_| Mlp::new(&sizes, cfg.activation, OutputActivation::Identity, rng))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        };
        let opts = members
            .iter()
            .map(|m| AdamState::new(m.num_params(), adam))
            .collect();
        Ok(Self {
            members,
            opts,
            input_norm: Normalizer::new(state_dim + action_dim, cfg.min_std),
            delta_norm: Normalizer::new(state_dim, cfg.min_std),
            state_dim,
            action_dim,
            train_steps: 0,
            skipped_steps: 0,
        })
    }

    /// Assemble from parts (checkpoint restore, tests).
    pub fn from_parts(
        members: Vec<Mlp>,
        opts: Vec<AdamState>,
        input_norm: Normalizer,
        delta_norm: Normalizer,
        train_steps: u64,
    ) -> Result<Self> {
        if members.len() < 2 || members.len() != opts.len() {
            return Err(Error::Config(
                "ensemble needs ≥2 members, one optimizer each".into(),
            ));
        }
        let state_dim = delta_norm.dim();
        let action_dim = input_norm
            .dim()
            .checked_sub(state_dim)
            .ok_or_else(|| Error::Config("input normalizer narrower than state".into()))?;
        for m in &members {
            check_dim(
                "ensemble member input",
                state_dim + action_dim,
                m.input_dim(),
            )?;
            check_dim("ensemble member output", state_dim, m.output_dim())?;
            if m.layer_sizes() != members[0].layer_sizes() {
                return Err(Error::Config("ensemble members must share topology".into()));
            }
        }
        Ok(Self {
            members,
            opts,
            input_norm,
            delta_norm,
            state_dim,
            action_dim,
            train_steps,
            skipped_steps: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp] {
        &mut self.members
    }

    pub fn optimizers(&self) -> &[AdamState] {
        &self.opts
    }

    pub fn input_normalizer(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn delta_normalizer(&self) -> &Normalizer {
        &self.delta_norm
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn is_trained(&self) -> bool {
        self.train_steps > 0
    }

    fn inputs(&self, s: &[f64], a: &[f64], n: usize) -> Result<Vec<f64>> {
        check_dim("ensemble states", n * self.state_dim, s.len())?;
        check_dim("ensemble actions", n * self.action_dim, a.len())?;
        let mut x = Vec::with_capacity(n * (self.state_dim + self.action_dim));
        for (sr, ar) in s
            .chunks_exact(self.state_dim)
            .zip(a.chunks_exact(self.action_dim.max(1)))
            .take(n)
        {
            x.extend_from_slice(sr);
            x.extend_from_slice(&ar[..self.action_dim]);
        }
        Ok(x)
    }

    /// Normalized inputs and residual targets of a batch under the current
    /// normalizers.
    fn regression_data(&self, batch: &[&Transition]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut x, mut delta) = self.raw_regression_data(batch)?;
        self.input_norm.normalize_in_place(&mut x);
        self.delta_norm.normalize_in_place(&mut delta);
        Ok((x, delta))
    }

    fn raw_regression_data(&self, batch: &[&Transition]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = batch.len();
        let mut s = Vec::with_capacity(n * self.state_dim);
        let mut a = Vec::with_capacity(n * self.action_dim);
        let mut delta = Vec::with_capacity(n * self.state_dim);
        for t in batch {
            check_dim("transition state", self.state_dim, t.s.len())?;
            check_dim("transition next state", self.state_dim, t.s_next.len())?;
            s.extend_from_slice(&t.s);
            a.extend_from_slice(&t.a);
            delta.extend(t.s_next.iter().zip(&t.s).map(|(x1, x0)| x1 - x0));
        }
        Ok((self.inputs(&s, &a, n)?, delta))
    }

    fn member_objective(
        member: &Mlp,
        x: &[f64],
        target: &[f64],
        n: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let tape = member.forward_tape(x, n)?;
        let m = target.len() as f64;
        let diff: Vec<f64> = tape
            .output()
            .iter()
            .zip(target)
            .map(|(y, t)| y - t)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
        let up: Vec<f64> = diff.iter().map(|d| 2.0 * d / m).collect();
        let mut grads = vec![0.0; member.num_params()];
        member.backward_tape(&tape, &up, Some(&mut grads), false)?;
        Ok((loss, grads))
    }

    /// Normalized residual MSE of member `k` on `batch` and its parameter
    /// gradient, under the current normalizers.
    pub fn member_loss_and_grads(
        &self,
        k: usize,
        batch: &[&Transition],
    ) -> Result<(f64, Vec<f64>)> {
        let (x, target) = self.regression_data(batch)?;
        Self::member_objective(&self.members[k], &x, &target, batch.len())
    }

    /// One optimizer step per member on the normalized residual MSE; all
    /// members see the same batch. Normalizers absorb the batch first.
    pub fn train_model_step(&mut self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let n = batch.len();
        if n == 0 {
            return Ok(vec![0.0; self.members.len()]);
        }
        let (x, delta) = self.raw_regression_data(batch)?;
        self.input_norm.update(&x, n)?;
        self.delta_norm.update(&delta, n)?;
        let (x, target) = self.regression_data(batch)?;

        let mut losses = Vec::with_capacity(self.members.len());
        let mut any_skipped = false;
        for (member, opt) in self.members.iter_mut().zip(&mut self.opts) {
            let (loss, grads) = Self::member_objective(member, &x, &target, n)?;
            losses.push(loss);
            if !loss.is_finite() {
                any_skipped = true;
                continue;
            }
            if opt.step(member.params_mut(), &grads)? == StepOutcome::SkippedNonFinite {
                any_skipped = true;
            }
        }
        if any_skipped {
            self.skipped_steps += 1;
        }
        self.train_steps += 1;
        Ok(losses)
    }

    /// Forward pass of every member that keeps tapes for [`backward`](Self::backward).
    pub fn forward_tape(&self, s: &[f64], a: &[f64], n: usize) -> Result<EnsembleTape> {
        let mut x = self.inputs(s, a, n)?;
        self.input_norm.normalize_in_place(&mut x);
        let d = self.state_dim;
        let k = self.members.len() as f64;
        let member_tapes = self
            .members
            .iter()
            .map(|m| m.forward_tape(&x, n))
            .collect::<Result<Vec<_>>>()?;
        let mut mean_norm = vec![0.0; n * d];
        for t in &member_tapes {
            for (m, &y) in mean_norm.iter_mut().zip(t.output()) {
                *m += y / k;
            }
        }
        let mut disagreement = vec![0.0; n];
        for t in &member_tapes {
            for (row, (out, mean)) in t
                .output()
                .chunks_exact(d)
                .zip(mean_norm.chunks_exact(d))
                .enumerate()
            {
                disagreement[row] += out
                    .iter()
                    .zip(mean)
                    .map(|(y, m)| (y - m) * (y - m))
                    .sum::<f64>()
                    / (k * d as f64);
            }
        }
        let mut next_states = mean_norm.clone();
        self.delta_norm.denormalize_in_place(&mut next_states);
        for (ns, &s0) in next_states.iter_mut().zip(s) {
            *ns += s0;
        }
        Ok(EnsembleTape {
            batch: n,
            member_tapes,
            mean_norm,
            next_states,
            disagreement,
        })
    }

    /// Gradients of `Σ d_next · s_next + Σ d_dis · disagreement` with respect
    /// to the states and actions of the taped batch. Parameters are untouched.
    pub fn backward(
        &self,
        tape: &EnsembleTape,
        d_next: &[f64],
        d_disagreement: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = tape.batch;
        let d = self.state_dim;
        check_dim("ensemble next-state gradient", n * d, d_next.len())?;
        if let Some(g) = d_disagreement {
            check_dim("ensemble disagreement gradient", n, g.len())?;
        }
        let k = self.members.len() as f64;
        let delta_std = self.delta_norm.std();
        let in_std = self.input_norm.std();
        let d_mean: Vec<f64> = d_next
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&delta_std).map(|(g, s)| g * s / k))
            .collect();
        let in_dim = d + self.action_dim;
        let mut dx = vec![0.0; n * in_dim];
        for (member, mt) in self.members.iter().zip(&tape.member_tapes) {
            let mut up = d_mean.clone();
            if let Some(gd) = d_disagreement {
                let c = 2.0 / (k * d as f64);
                for (row, ((u, y), m)) in up
                    .chunks_exact_mut(d)
                    .zip(mt.output().chunks_exact(d))
                    .zip(tape.mean_norm.chunks_exact(d))
                    .enumerate()
                {
                    for j in 0..d {
                        u[j] += gd[row] * c * (y[j] - m[j]);
                    }
                }
            }
            let g = member
                .backward_tape(mt, &up, None, true)?
                .expect("input gradient requested");
            for (acc, v) in dx.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        let mut ds = d_next.to_vec();
        let mut da = vec![0.0; n * self.action_dim];
        for (row, xr) in dx.chunks_exact(in_dim).enumerate() {
            for j in 0..d {
                ds[row * d + j] += xr[j] / in_std[j];
            }
            for j in 0..self.action_dim {
                da[row * self.action_dim + j] = xr[d + j] / in_std[d + j];
            }
        }
        Ok((ds, da))
    }

    pub fn predict_mean_batch(&self, s: &[f64], a: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward_tape(s, a, n)?.next_states)
    }

    /// `s + denormalize(mean_k member_k(normalize(s, a)))`.
    pub fn predict_mean(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.predict_mean_batch(s, a, 1)
    }

    pub fn disagreement_batch(&self, s: &[f64], a: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward_tape(s, a, n)?.disagreement)
    }

    /// Mean over state dims of the across-member population variance of
    /// normalized Δs predictions.
    pub fn disagreement(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.disagreement_batch(s, a, 1)?[0])
    }

    /// Batched rollout under the mean dynamics. See [`ImaginedTrajectory`].
    #[allow(clippy::too_many_arguments)]
    pub fn imagine(
        &self,
        policy: &mut dyn BatchPolicy,
        start_states: &[Vec<f64>],
        goals: Option<&[GoalVec]>,
        horizon: usize,
        reward_fn: &mut dyn RewardFn,
        divergence_limit: f64,
        source: RolloutSource,
    ) -> Result<Vec<ImaginedTrajectory>> {
        let n = start_states.len();
        let d = self.state_dim;
        if let Some(g) = goals {
            check_dim("imagination goals", n, g.len())?;
        }
        let goal_flat: Option<Vec<f64>> =
            goals.map(|g| g.iter().flat_map(|g| g.vec.iter().copied()).collect());
        let mut trajs: Vec<ImaginedTrajectory> = start_states
            .iter()
            .enumerate()
            .map(|(i, s)| ImaginedTrajectory {
                states: vec![s.clone()],
                actions: Vec::new(),
                rewards: Vec::new(),
                goal: goals.map(|g| g[i].clone()),
                source,
                truncated: false,
            })
            .collect();
        let mut s: Vec<f64> = start_states.iter().flatten().copied().collect();
        check_dim("imagination start states", n * d, s.len())?;
        let mut alive = vec![true; n];
        for _ in 0..horizon {
            if !alive.iter().any(|&a| a) {
                break;
            }
            let a = policy.act_batch(&s, goal_flat.as_deref(), n);
            let tape = self.forward_tape(&s, &a, n)?;
            let r = reward_fn.reward_batch(&s, &a, &tape, goal_flat.as_deref(), n);
            for i in 0..n {
                if !alive[i] {
                    continue;
                }
                let next = &tape.next_states[i * d..(i + 1) * d];
                let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm.is_nan() || norm > divergence_limit {
                    alive[i] = false;
                    trajs[i].truncated = true;
                    continue;
                }
                let ad = self.action_dim;
                trajs[i].actions.push(a[i * ad..(i + 1) * ad].to_vec());
                trajs[i].states.push(next.to_vec());
                trajs[i].rewards.push(r[i]);
            }
            s = tape.next_states;
        }
        Ok(trajs)
    }
}

/// Where an imagined rollout came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutSource {
    GoalPolicy,
    ExplorePolicy,
    Scripted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedTrajectory {
    /// `H + 1` states unless truncated; `states[0]` is the real start state.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub goal: Option<GoalVec>,
    pub source: RolloutSource,
    pub truncated: bool,
}

/// Batched action selection used inside imagination.
pub trait BatchPolicy {
    /// `states` is `n x state_dim`; `goals` (if any) `n x goal_dim`.
    fn act_batch(&mut self, states: &[f64], goals: Option<&[f64]>, n: usize) -> Vec<f64>;
}

impl<F> BatchPolicy for F
where
    F: FnMut(&[f64], Option<&[f64]>, usize) -> Vec<f64>,
{
    fn act_batch(&mut self, states: &[f64], goals: Option<&[f64]>, n: usize) -> Vec<f64> {
        self(states, goals, n)
    }
}

/// Per-step reward of an imagined transition batch.
pub trait RewardFn {
    fn reward_batch(
        &mut self,
        states: &[f64],
        actions: &[f64],
        tape: &EnsembleTape,
        goals: Option<&[f64]>,
        n: usize,
    ) -> Vec<f64>;
}

/// Rewards every step with the ensemble disagreement at `(s_t, a_t)`.
pub struct DisagreementReward;

impl RewardFn for DisagreementReward {
    fn reward_batch(
        &mut self,
        _states: &[f64],
        _actions: &[f64],
        tape: &EnsembleTape,
        _goals: Option<&[f64]>,
        _n: usize,
    ) -> Vec<f64> {
        tape.disagreement.clone()
    }
}

/// Zero reward; for rollouts that only need states.
pub struct NoReward;

impl RewardFn for NoReward {
    fn reward_batch(
        &mut self,
        _states: &[f64],
        _actions: &[f64],
        _tape: &EnsembleTape,
        _goals: Option<&[f64]>,
        n: usize,
    ) -> Vec<f64> {
        vec![0.0; n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::Phase;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EnsembleConfig {
        EnsembleConfig {
            members: 3,
            hidden: vec![16, 16],
            ..EnsembleConfig::default()
        }
    }

    #[test]
    fn members_differ_after_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = DynamicsEnsemble::new(4, 2, &small_cfg(), &mut rng).unwrap();
        assert_ne!(e.members()[0].params(), e.members()[1].params());
    }

    #[test]
    fn identical_members_have_zero_disagreement_and_match_single_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = DynamicsEnsemble::new(4, 2, &small_cfg(), &mut rng).unwrap();
        let p = e.members()[0].params().to_vec();
        for m in e.members_mut() {
            m.params_mut().copy_from_slice(&p);
        }
        let s = [0.1, 0.2, -0.3, 0.0];
        let a = [0.5, -0.5];
        assert_eq!(e.disagreement(&s, &a).unwrap(), 0.0);
        let single = e.members()[0]
            .forward(&[0.1, 0.2, -0.3, 0.0, 0.5, -0.5])
            .unwrap();
        let pred = e.predict_mean(&s, &a).unwrap();
        for j in 0..4 {
            assert!((pred[j] - (s[j] + single[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_offset_gives_quarter_square_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EnsembleConfig {
            members: 2,
            ..small_cfg()
        };
        let mut e = DynamicsEnsemble::new(3, 1, &cfg, &mut rng).unwrap();
        let p = e.members()[0].params().to_vec();
        e.members_mut()[1].params_mut().copy_from_slice(&p);
        let c = 0.8;
        let last = e.members()[1].num_layers() - 1;
        e.members_mut()[1].biases_mut(last)[1] += c;
        let dis = e.disagreement(&[0.3, -0.1, 0.2], &[0.4]).unwrap();
        // c^2/4 in one of three dims, averaged over dims
        assert!((dis - c * c / 4.0 / 3.0).abs() < 1e-12, "{dis}");
    }

    #[test]
    fn disagreement_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = DynamicsEnsemble::new(4, 2, &small_cfg(), &mut rng).unwrap();
        let mut members = e.members().to_vec();
        members.reverse();
        let f = DynamicsEnsemble::from_parts(
            members,
            e.optimizers().to_vec(),
            e.input_normalizer().clone(),
            e.delta_normalizer().clone(),
            0,
        )
        .unwrap();
        let s = [0.4, -0.2, 0.1, 0.3];
        let a = [0.9, 0.1];
        let d1 = e.disagreement(&s, &a).unwrap();
        let d2 = f.disagreement(&s, &a).unwrap();
        assert!((d1 - d2).abs() <= 1e-15 * d1.abs().max(1.0));
    }

    #[test]
    fn untrained_prediction_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = DynamicsEnsemble::new(4, 2, &EnsembleConfig::default(), &mut rng).unwrap();
        let p = e.predict_mean(&[1.0, 2.0, 0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn learns_identity_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut e = DynamicsEnsemble::new(2, 1, &small_cfg(), &mut rng).unwrap();
        let data: Vec<Transition> = (0..64)
            .map(|i| {
                let x = i as f64 / 32.0 - 1.0;
                Transition {
                    s: vec![x, -x],
                    a: vec![(i % 7) as f64 / 7.0],
                    s_next: vec![x, -x],
                    global_step: i,
                    traj_id: 0,
                    phase: Phase::Explore,
                }
            })
            .collect();
        let batch: Vec<&Transition> = data.iter().collect();
        let mut losses = vec![];
        for _ in 0..500 {
            losses = e.train_model_step(&batch).unwrap();
        }
        assert!(losses.iter().all(|&l| l < 1e-3), "{losses:?}");
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut e = DynamicsEnsemble::new(3, 2, &small_cfg(), &mut rng).unwrap();
        let data: Vec<Transition> = (0..32)
            .map(|i| {
                let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let s_next = vec![s[0] + 0.1 * a[0], s[1] + 0.1 * a[1], s[2] * 0.9];
                Transition {
                    s,
                    a,
                    s_next,
                    global_step: i,
                    traj_id: 0,
                    phase: Phase::Explore,
                }
            })
            .collect();
        let batch: Vec<&Transition> = data.iter().collect();
        for _ in 0..20 {
            e.train_model_step(&batch).unwrap();
        }
        let s = [0.2, -0.4, 0.7];
        let a = [0.3, -0.8];
        let w_next = [0.7, -1.1, 0.4];
        let w_dis = 3.0;
        let objective = |s: &[f64], a: &[f64]| {
            let t = e.forward_tape(s, a, 1).unwrap();
            t.next_states
                .iter()
                .zip(&w_next)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                + w_dis * t.disagreement[0]
        };
        let tape = e.forward_tape(&s, &a, 1).unwrap();
        let (ds, da) = e.backward(&tape, &w_next, Some(&[w_dis])).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut up = s;
            up[j] += h;
            let mut dn = s;
            dn[j] -= h;
            let num = (objective(&up, &a) - objective(&dn, &a)) / (2.0 * h);
            assert!(
                (num - ds[j]).abs() < 1e-6 * num.abs().max(1.0),
                "ds[{j}] {num} vs {}",
                ds[j]
            );
        }
        for j in 0..2 {
            let mut up = a;
            up[j] += h;
            let mut dn = a;
            dn[j] -= h;
            let num = (objective(&s, &up) - objective(&s, &dn)) / (2.0 * h);
            assert!(
                (num - da[j]).abs() < 1e-6 * num.abs().max(1.0),
                "da[{j}] {num} vs {}",
                da[j]
            );
        }
    }

    #[test]
    fn zero_horizon_imagination_returns_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = DynamicsEnsemble::new(2, 1, &small_cfg(), &mut rng).unwrap();
        let mut pol = |_s: &[f64], _g: Option<&[f64]>, n: usize| vec![0.0; n];
        let t = e
            .imagine(
                &mut pol,
                &[vec![0.5, 0.5]],
                None,
                0,
                &mut NoReward,
                100.0,
                RolloutSource::Scripted,
            )
            .unwrap();
        assert_eq!(t[0].states, vec![vec![0.5, 0.5]]);
        assert!(t[0].actions.is_empty());
    }

    #[test]
    fn divergence_guard_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut e = DynamicsEnsemble::new(2, 1, &small_cfg(), &mut rng).unwrap();
        for m in e.members_mut() {
            let last = m.num_layers() - 1;
            m.biases_mut(last).iter_mut().for_each(|b| *b = 5.0);
        }
        let mut pol = |_s: &[f64], _g: Option<&[f64]>, n: usize| vec![0.0; n];
        let t = e
            .imagine(
                &mut pol,
                &[vec![0.0, 0.0]],
                None,
                10,
                &mut NoReward,
                12.0,
                RolloutSource::Scripted,
            )
            .unwrap();
        assert!(t[0].truncated);
        assert!(t[0].states.len() < 11);
        assert!(t[0]
            .states
            .iter()
            .all(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt() <= 12.0));
    }
}
