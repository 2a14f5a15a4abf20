//! Real-environment data collection: phased Go-Explore, PEG goal selection
//! and the Back-and-Forth controller, plus the baseline and ablation variants.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agents::{ActMode, Agent, MeanPolicy, ValueNet};
use crate::buffer::{Phase, ReplayBuffer, Transition};
use crate::envs::{EnvCursor, EnvSpec, GoalVec};
use crate::error::{Error, Result};
use crate::world_model::{
    BatchPolicy, DisagreementReward, DynamicsEnsemble, NoReward, RolloutSource,
};

/// Collection scheme and imagination-goal policy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Morefree,
    ResetFreePeg,
    EpisodicPeg,
    NoBfge,
    NoImag,
    OnlyTaskGoals,
    Random,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Morefree,
        Variant::ResetFreePeg,
        Variant::EpisodicPeg,
        Variant::NoBfge,
        Variant::NoImag,
        Variant::OnlyTaskGoals,
        Variant::Random,
    ];

    /// The fixed ablation suite.
    pub const ABLATIONS: [Variant; 5] = [
        Variant::Morefree,
        Variant::NoBfge,
        Variant::NoImag,
        Variant::OnlyTaskGoals,
        Variant::ResetFreePeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Morefree => "morefree",
            Variant::ResetFreePeg => "reset_free_peg",
            Variant::EpisodicPeg => "episodic_peg",
            Variant::NoBfge => "no_bfge",
            Variant::NoImag => "no_imag",
            Variant::OnlyTaskGoals => "only_task_goals",
            Variant::Random => "random",
        }
    }

    /// α used by the Back-and-Forth branch draw; `None` for variants that do
    /// not run it.
    pub fn collection_alpha(self, alpha: f64) -> Option<f64> {
        match self {
            Variant::Morefree | Variant::NoImag => Some(alpha),
            Variant::OnlyTaskGoals => Some(1.0),
            Variant::NoBfge | Variant::ResetFreePeg => Some(0.0),
            Variant::EpisodicPeg | Variant::Random => None,
        }
    }

    /// α of the imagination goal mixture.
    pub fn imagination_alpha(self, alpha: f64) -> f64 {
        match self {
            Variant::Morefree | Variant::NoBfge => alpha,
            Variant::OnlyTaskGoals => 1.0,
            Variant::NoImag | Variant::ResetFreePeg | Variant::EpisodicPeg | Variant::Random => 0.0,
        }
    }

    pub fn trains(self) -> bool {
        self != Variant::Random
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoExploreConfig {
    pub h_go: usize,
    pub h_explore: usize,
    pub alpha: f64,
    pub peg_candidates: usize,
    pub variant: Variant,
    /// Imagination horizon used to score PEG candidates.
    pub peg_horizon: usize,
    pub peg_gamma: f64,
    pub peg_bootstrap: bool,
}

impl GoExploreConfig {
    pub fn for_env(spec: &EnvSpec, variant: Variant) -> Self {
        Self {
            h_go: spec.eval_horizon / 2,
            h_explore: spec.eval_horizon / 2,
            alpha: 0.2,
            peg_candidates: 128,
            variant,
            peg_horizon: 15,
            peg_gamma: 0.99,
            peg_bootstrap: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_go == 0 || self.h_explore == 0 {
            return Err(Error::Config("h_go and h_explore must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.peg_candidates == 0 {
            return Err(Error::Config("peg_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// Which policy drives a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Goal,
    Explore,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub goal: Option<GoalVec>,
    pub policy: PolicyTag,
    pub horizon: usize,
    pub phase: Phase,
}

/// Pending segments of the current cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhasePlan {
    pub segments: VecDeque<Segment>,
}

impl PhasePlan {
    pub fn total_horizon(&self) -> usize {
        self.segments.iter().map(|s| s.horizon).sum()
    }

    fn go_explore(&mut self, goal: GoalVec, phase: Phase, cfg: &GoExploreConfig) {
        self.segments.push_back(Segment {
            goal: Some(goal),
            policy: PolicyTag::Goal,
            horizon: cfg.h_go,
            phase,
        });
        self.segments.push_back(Segment {
            goal: None,
            policy: PolicyTag::Explore,
            horizon: cfg.h_explore,
            phase: Phase::Explore,
        });
    }
}

/// Branch taken by one collection cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Forward to an evaluation goal, then back to an initial-state goal.
    Task,
    Exploratory,
    Episodic,
    Random,
}

/// Structured record emitted by the collector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CollectorEvent {
    Cycle {
        cycle: u64,
        env_step: u64,
        branch: Branch,
        /// Branch draw `u`; the task branch is taken iff `u < alpha`.
        draw: Option<f64>,
        goals: Vec<(Phase, Vec<f64>)>,
    },
    Segment {
        cycle: u64,
        phase: Phase,
        goal: Option<Vec<f64>>,
        start_step: u64,
        steps: usize,
        reached: bool,
    },
}

/// Action sources used during collection.
pub trait Policies {
    fn goal_action(&mut self, s: &[f64], g: &GoalVec, rng: &mut dyn RngCore) -> Vec<f64>;
    fn explore_action(&mut self, s: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
    /// Exploratory goal chosen from the live state.
    fn exploratory_goal(
        &mut self,
        live: &[f64],
        spec: &EnvSpec,
        buffer: &ReplayBuffer,
        rng: &mut dyn RngCore,
    ) -> GoalVec;
}

/// Uniform random actions and goals.
pub struct RandomPolicies {
    pub action_dim: usize,
    pub bound: f64,
}

impl RandomPolicies {
    pub fn for_env(spec: &EnvSpec) -> Self {
        Self {
            action_dim: spec.action_dim,
            bound: spec.action_bound,
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.action_dim)
            .map(|_| rng.gen_range(-self.bound..=self.bound))
            .collect()
    }
}

impl Policies for RandomPolicies {
    fn goal_action(&mut self, _s: &[f64], _g: &GoalVec, rng: &mut dyn RngCore) -> Vec<f64> {
        self.sample(rng)
    }

    fn explore_action(&mut self, _s: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.sample(rng)
    }

    fn exploratory_goal(
        &mut self,
        _live: &[f64],
        spec: &EnvSpec,
        _buffer: &ReplayBuffer,
        rng: &mut dyn RngCore,
    ) -> GoalVec {
        spec.sample_uniform_goal(rng)
    }
}

/// The learned policies, sampling in train mode, with PEG goals.
pub struct AgentPolicies<'a> {
    pub agent: &'a Agent,
    pub cfg: &'a GoExploreConfig,
}

impl Policies for AgentPolicies<'_> {
    fn goal_action(&mut self, s: &[f64], g: &GoalVec, rng: &mut dyn RngCore) -> Vec<f64> {
        self.agent
            .goal
            .policy
            .act(s, Some(&g.vec), ActMode::Train, rng)
            .expect("goal policy dimensions fixed at construction")
    }

    fn explore_action(&mut self, s: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.agent
            .explore
            .policy
            .act(s, None, ActMode::Train, rng)
            .expect("explore policy dimensions fixed at construction")
    }

    fn exploratory_goal(
        &mut self,
        live: &[f64],
        spec: &EnvSpec,
        buffer: &ReplayBuffer,
        rng: &mut dyn RngCore,
    ) -> GoalVec {
        let bootstrap = self.cfg.peg_bootstrap.then_some(&self.agent.explore.value);
        peg_goal(
            &self.agent.ensemble,
            &mut MeanPolicy(&self.agent.goal.policy),
            &mut MeanPolicy(&self.agent.explore.policy),
            bootstrap,
            spec,
            buffer,
            &[live.to_vec()],
            &PegConfig::from(self.cfg),
            self.agent.divergence_limit(),
            rng,
        )
        .expect("PEG scoring dimensions fixed at construction")
        .goal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PegConfig {
    pub candidates: usize,
    pub horizon: usize,
    pub gamma: f64,
}

impl From<&GoExploreConfig> for PegConfig {
    fn from(c: &GoExploreConfig) -> Self {
        Self {
            candidates: c.peg_candidates,
            horizon: c.peg_horizon,
            gamma: c.peg_gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PegChoice {
    pub goal: GoalVec,
    pub index: usize,
    /// Empty on a cold start.
    pub scores: Vec<f64>,
}

/// Candidate goals: the first half projected buffer states, the rest
/// uniform over goal space.
pub fn peg_candidates<R: Rng + ?Sized>(
    n: usize,
    spec: &EnvSpec,
    buffer: &ReplayBuffer,
    rng: &mut R,
) -> Vec<GoalVec> {
    let from_buffer = if buffer.is_empty() { 0 } else { n / 2 };
    let mut out = buffer
        .sample_states_as_goals(from_buffer, spec, rng)
        .unwrap_or_default();
    while out.len() < n {
        out.push(spec.sample_uniform_goal(rng));
    }
    out
}

/// Goal maximizing the imagined exploration value: for each candidate, roll
/// the goal policy toward it, then the exploration policy, and score the
/// discounted disagreement of the exploration segment (plus `V^E` at its end
/// when `bootstrap` is given), averaged over `starts`. Ties go to the lowest
/// index. Reads the model and policies only.
#[allow(clippy::too_many_arguments)]
pub fn peg_goal<R: Rng + ?Sized>(
    ensemble: &DynamicsEnsemble,
    go: &mut dyn BatchPolicy,
    explore: &mut dyn BatchPolicy,
    bootstrap: Option<&ValueNet>,
    spec: &EnvSpec,
    buffer: &ReplayBuffer,
    starts: &[Vec<f64>],
    cfg: &PegConfig,
    divergence_limit: f64,
    rng: &mut R,
) -> Result<PegChoice> {
    if !ensemble.is_trained() || starts.is_empty() {
        return Ok(PegChoice {
            goal: spec.sample_uniform_goal(rng),
            index: 0,
            scores: Vec::new(),
        });
    }
    let candidates = peg_candidates(cfg.candidates, spec, buffer, rng);
    let m = starts.len();
    let mut rows = Vec::with_capacity(candidates.len() * m);
    let mut goals = Vec::with_capacity(candidates.len() * m);
    for c in &candidates {
        for s in starts {
            rows.push(s.clone());
            goals.push(c.clone());
        }
    }
    let go_trajs = ensemble.imagine(
        go,
        &rows,
        Some(&goals),
        cfg.horizon,
        &mut NoReward,
        divergence_limit,
        RolloutSource::GoalPolicy,
    )?;
    let ends: Vec<Vec<f64>> = go_trajs
        .iter()
        .map(|t| t.states.last().expect("trajectories are non-empty").clone())
        .collect();
    let exp_trajs = ensemble.imagine(
        explore,
        &ends,
        None,
        cfg.horizon,
        &mut DisagreementReward,
        divergence_limit,
        RolloutSource::ExplorePolicy,
    )?;
    let finals: Vec<f64> = exp_trajs
        .iter()
        .flat_map(|t| {
            t.states
                .last()
                .expect("trajectories are non-empty")
                .iter()
                .copied()
        })
        .collect();
    let boot = match bootstrap {
        Some(v) => v.values(&finals, None, exp_trajs.len())?,
        None => vec![0.0; exp_trajs.len()],
    };
    let mut scores = vec![0.0; candidates.len()];
    for (r, (t, b)) in exp_trajs.iter().zip(&boot).enumerate() {
        let mut disc = 1.0;
        let mut total = 0.0;
        for &x in &t.rewards {
            total += disc * x;
            disc *= cfg.gamma;
        }
        if !t.truncated && !go_trajs[r].truncated {
            total += disc * b;
        }
        scores[r / m] += total / m as f64;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(PegChoice {
        goal: candidates[best].clone(),
        index: best,
        scores,
    })
}

/// Transitions of one Go then Explore pass.
pub type GoExploreTrace = (Vec<Transition>, Vec<Transition>);

/// Run the goal policy toward `g` for `h_go` steps, then the exploration
/// policy for `h_explore` steps, without resetting; both parts go into
/// `buffer`.
#[allow(clippy::too_many_arguments)]
pub fn go_explore(
    cursor: &mut EnvCursor,
    g: &GoalVec,
    go_phase: Phase,
    policies: &mut dyn Policies,
    cfg: &GoExploreConfig,
    buffer: &mut ReplayBuffer,
    traj_id: u64,
    rng: &mut dyn RngCore,
) -> Result<GoExploreTrace> {
    let mut run = |n: usize,
                   phase: Phase,
                   id: u64,
                   cursor: &mut EnvCursor,
                   policies: &mut dyn Policies,
                   rng: &mut dyn RngCore| {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let a = match phase {
                Phase::Explore => policies.explore_action(&cursor.state.vec, rng),
                _ => policies.goal_action(&cursor.state.vec, g, rng),
            };
            let a = cursor.spec.clamp_action(&a);
            let (s, s_next) = cursor.step(&a);
            let t = Transition {
                s,
                a,
                s_next,
                global_step: cursor.total_steps(),
                traj_id: id,
                phase,
            };
            buffer.insert(t.clone())?;
            out.push(t);
        }
        Ok::<_, Error>(out)
    };
    let tg = run(cfg.h_go, go_phase, traj_id, cursor, policies, rng)?;
    let te = run(
        cfg.h_explore,
        Phase::Explore,
        traj_id + 1,
        cursor,
        policies,
        rng,
    )?;
    Ok((tg, te))
}

/// What one collector step did.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectStep {
    pub transition: Transition,
    pub events: Vec<CollectorEvent>,
}

struct Active {
    segment: Segment,
    cycle: u64,
    traj_id: u64,
    start_step: u64,
    done: usize,
    reached: bool,
}

/// Step-wise executor of the variant's collection schedule.
pub struct Collector {
    cfg: GoExploreConfig,
    plan: PhasePlan,
    active: Option<Active>,
    cycle: u64,
    next_traj: u64,
    branch_counts: [u64; 4],
}

impl Collector {
    pub fn new(cfg: GoExploreConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            plan: PhasePlan::default(),
            active: None,
            cycle: 0,
            next_traj: 1,
            branch_counts: [0; 4],
        })
    }

    pub fn config(&self) -> &GoExploreConfig {
        &self.cfg
    }

    pub fn cycles(&self) -> u64 {
        self.cycle
    }

    /// Cycles per branch: task, exploratory, episodic, random.
    pub fn branch_counts(&self) -> [u64; 4] {
        self.branch_counts
    }

    /// Build the next cycle's plan from the live state.
    ///
    /// `steps_to_boundary` is the number of steps until the next hard reset
    /// (or the end of the run); only the episodic variant uses it.
    #[allow(clippy::too_many_arguments)]
    pub fn plan_cycle(
        &mut self,
        live: &[f64],
        env_step: u64,
        spec: &EnvSpec,
        policies: &mut dyn Policies,
        buffer: &ReplayBuffer,
        steps_to_boundary: u64,
        rng: &mut dyn RngCore,
    ) -> CollectorEvent {
        let cfg = self.cfg.clone();
        let mut plan = PhasePlan::default();
        let mut goals = Vec::new();
        let mut draw = None;
        let branch = match cfg.variant {
            Variant::Random => {
                plan.segments.push_back(Segment {
                    goal: None,
                    policy: PolicyTag::Random,
                    horizon: cfg.h_go + cfg.h_explore,
                    phase: Phase::Explore,
                });
                Branch::Random
            }
            Variant::EpisodicPeg => {
                let total = steps_to_boundary.max(2) as usize;
                let g = policies.exploratory_goal(live, spec, buffer, rng);
                goals.push((Phase::GoExpl, g.vec.clone()));
                plan.segments.push_back(Segment {
                    goal: Some(g),
                    policy: PolicyTag::Goal,
                    horizon: total / 2,
                    phase: Phase::GoExpl,
                });
                plan.segments.push_back(Segment {
                    goal: None,
                    policy: PolicyTag::Explore,
                    horizon: total - total / 2,
                    phase: Phase::Explore,
                });
                Branch::Episodic
            }
            v => {
                let alpha = v
                    .collection_alpha(cfg.alpha)
                    .expect("back-and-forth variant");
                let u: f64 = rng.gen();
                draw = Some(u);
                if u < alpha {
                    let g_star = spec.sample_eval_goal(rng);
                    let g0 = spec.sample_initial_goal(rng);
                    goals.push((Phase::GoTask, g_star.vec.clone()));
                    goals.push((Phase::GoBack, g0.vec.clone()));
                    plan.go_explore(g_star, Phase::GoTask, &cfg);
                    plan.go_explore(g0, Phase::GoBack, &cfg);
                    Branch::Task
                } else {
                    let g = policies.exploratory_goal(live, spec, buffer, rng);
                    goals.push((Phase::GoExpl, g.vec.clone()));
                    plan.go_explore(g, Phase::GoExpl, &cfg);
                    Branch::Exploratory
                }
            }
        };
        self.branch_counts[branch as usize] += 1;
        self.plan = plan;
        self.cycle += 1;
        CollectorEvent::Cycle {
            cycle: self.cycle,
            env_step,
            branch,
            draw,
            goals,
        }
    }

    /// Take one environment step under the current plan, planning a new
    /// cycle first when the previous one is exhausted.
    pub fn step(
        &mut self,
        cursor: &mut EnvCursor,
        policies: &mut dyn Policies,
        buffer: &mut ReplayBuffer,
        steps_to_boundary: u64,
        rng: &mut dyn RngCore,
    ) -> Result<CollectStep> {
        let mut events = Vec::new();
        if self.active.is_none() {
            if self.plan.segments.is_empty() {
                let live = cursor.state.vec.clone();
                let spec = cursor.spec.clone();
                events.push(self.plan_cycle(
                    &live,
                    cursor.total_steps(),
                    &spec,
                    policies,
                    buffer,
                    steps_to_boundary,
                    rng,
                ));
            }
            let segment = self.plan.segments.pop_front().expect("plans are non-empty");
            self.active = Some(Active {
                segment,
                cycle: self.cycle,
                traj_id: self.next_traj,
                start_step: cursor.total_steps(),
                done: 0,
                reached: false,
            });
            self.next_traj += 1;
        }
        let act = self.active.as_mut().expect("set above");
        let s = &cursor.state.vec;
        let a = match (act.segment.policy, &act.segment.goal) {
            (PolicyTag::Goal, Some(g)) => policies.goal_action(s, g, rng),
            (PolicyTag::Goal, None) | (PolicyTag::Explore, _) => policies.explore_action(s, rng),
            (PolicyTag::Random, _) => RandomPolicies::for_env(&cursor.spec).sample(rng),
        };
        let a = cursor.spec.clamp_action(&a);
        let (s, s_next) = cursor.step(&a);
        if let Some(g) = &act.segment.goal {
            act.reached |= EnvSpec::success(&s_next, g);
        }
        let transition = Transition {
            s,
            a,
            s_next,
            global_step: cursor.total_steps(),
            traj_id: act.traj_id,
            phase: act.segment.phase,
        };
        buffer.insert(transition.clone())?;
        act.done += 1;
        if act.done == act.segment.horizon {
            let act = self.active.take().expect("set above");
            events.push(CollectorEvent::Segment {
                cycle: act.cycle,
                phase: act.segment.phase,
                goal: act.segment.goal.map(|g| g.vec),
                start_step: act.start_step,
                steps: act.done,
                reached: act.reached,
            });
        }
        Ok(CollectStep { transition, events })
    }
}
