//! Reset-free 2D continuous environments.
//!
//! Three layouts are built in: a U-shaped point maze, an open square arena
//! with a centred start, and a walled arena in which the agent pushes an
//! object whose corners are sticky. Stepping is a pure function of
//! `(state, action)`; all randomness enters through `reset` and goal sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub type ActionVec = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "umaze")]
    UMaze,
    #[serde(rename = "arena")]
    Arena,
    #[serde(rename = "object-arena")]
    ObjectArena,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::UMaze, EnvId::Arena, EnvId::ObjectArena];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::UMaze => "umaze",
            EnvId::Arena => "arena",
            EnvId::ObjectArena => "object-arena",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment `{s}`")))
    }
}

/// Axis-aligned box `[lo, hi]` in two dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Rect {
    pub const fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    pub fn contains_strict(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] > self.lo[i] && p[i] < self.hi[i])
    }

    pub fn inflate(&self, by: f64) -> Rect {
        Rect::new(
            [self.lo[0] - by, self.lo[1] - by],
            [self.hi[0] + by, self.hi[1] + by],
        )
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.lo[0] + self.hi[0]),
            0.5 * (self.lo[1] + self.hi[1]),
        ]
    }

    pub fn diameter(&self) -> f64 {
        ((self.hi[0] - self.lo[0]).powi(2) + (self.hi[1] - self.lo[1]).powi(2)).sqrt()
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
        ]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            rng.gen_range(self.lo[0]..=self.hi[0]),
            rng.gen_range(self.lo[1]..=self.hi[1]),
        ]
    }
}

/// Axis-aligned wall segment with a physical half-thickness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallSegment {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub half_thickness: f64,
}

impl WallSegment {
    pub const fn new(start: [f64; 2], end: [f64; 2], half_thickness: f64) -> Self {
        Self {
            start,
            end,
            half_thickness,
        }
    }

    /// Region a body of radius `body_radius` may not enter.
    pub fn forbidden_band(&self, body_radius: f64) -> Rect {
        Rect::new(
            [
                self.start[0].min(self.end[0]),
                self.start[1].min(self.end[1]),
            ],
            [
                self.start[0].max(self.end[0]),
                self.start[1].max(self.end[1]),
            ],
        )
        .inflate(self.half_thickness + body_radius)
    }
}

/// Sticky corners of the object arena: inside `corner_radius` of a corner the
/// object only follows an agent that moves within `release_cone_halfangle` of
/// the direction towards the arena centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkCornerSpec {
    pub corner_radius: f64,
    pub release_cone_halfangle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvalGoalDist {
    Fixed(Vec<f64>),
    Uniform(Rect),
}

/// Physical parameters shared by the built-in layouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Body {
    /// Damped double integrator: `v' = damping * v + (1 - damping) * max_speed * a`.
    PointMass { max_speed: f64, damping: f64 },
    /// First-order agent `p' = p + step * a` pushing a round object.
    Pusher {
        step: f64,
        object_radius: f64,
        sink: SinkCornerSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: EnvId,
    /// Interior of the outer walls.
    pub workspace: Rect,
    pub wall_segments: Vec<WallSegment>,
    pub body_radius: f64,
    pub body: Body,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub eval_horizon: usize,
    /// `None`: only the hard reset at `t = 0`.
    pub hard_reset_interval: Option<u64>,
    pub reset_noise_halfwidth: f64,
    pub start_state: Vec<f64>,
    /// State dimensions that carry positions (noised on reset).
    pub position_dims: Vec<usize>,
    pub goal_projection: Vec<usize>,
    pub success_epsilon: f64,
    pub eval_goal: EvalGoalDist,
    pub gamma: f64,
}

/// Per-dimension `(x - shift) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScale {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScale {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect()
    }

    /// Writes the scaled row into `out` (appending).
    pub fn extend_scaled(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(
            x.iter()
                .zip(self.shift.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v - m) * s),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub vec: Vec<f64>,
    pub step_in_env: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalVec {
    pub vec: Vec<f64>,
    pub projection: Vec<usize>,
    pub epsilon: f64,
}

impl GoalVec {
    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// Outcome of [`EnvSpec::evaluate_episodic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_success: f64,
    pub mean_discounted_return: f64,
}

fn boundary_walls(ws: Rect) -> Vec<WallSegment> {
    let [x0, y0] = ws.lo;
    let [x1, y1] = ws.hi;
    let t = 0.05;
    vec![
        WallSegment::new([x0 - t, y0 - t], [x1 + t, y0 - t], t),
        WallSegment::new([x0 - t, y1 + t], [x1 + t, y1 + t], t),
        WallSegment::new([x0 - t, y0 - t], [x0 - t, y1 + t], t),
        WallSegment::new([x1 + t, y0 - t], [x1 + t, y1 + t], t),
    ]
}

impl EnvSpec {
    pub fn new(env_id: EnvId) -> Self {
        match env_id {
            EnvId::UMaze => Self::umaze(),
            EnvId::Arena => Self::arena(),
            EnvId::ObjectArena => Self::object_arena(),
        }
    }

    /// 3x3 unit maze whose middle row is blocked from the left wall to
    /// `x = 2`, so the start (bottom left) and goal (top left) are joined by a
    /// U-shaped corridor.
    pub fn umaze() -> Self {
        let workspace = Rect::new([0.0, 0.0], [3.0, 3.0]);
        let mut walls = boundary_walls(workspace);
        walls.push(WallSegment::new([0.0, 1.5], [2.0, 1.5], 0.15));
        Self {
            env_id: EnvId::UMaze,
            workspace,
            wall_segments: walls,
            body_radius: 0.05,
            body: Body::PointMass {
                max_speed: 0.15,
                damping: 0.5,
            },
            state_dim: 4,
            action_dim: 2,
            action_bound: 1.0,
            eval_horizon: 100,
            hard_reset_interval: None,
            reset_noise_halfwidth: 0.1,
            start_state: vec![0.5, 0.5, 0.0, 0.0],
            position_dims: vec![0, 1],
            goal_projection: vec![0, 1],
            success_epsilon: 0.25,
            eval_goal: EvalGoalDist::Fixed(vec![0.5, 2.5]),
            gamma: 0.99,
        }
    }

    /// Open square room, start at the centre, goals in the top-right box.
    pub fn arena() -> Self {
        let workspace = Rect::new([-3.0, -3.0], [3.0, 3.0]);
        Self {
            env_id: EnvId::Arena,
            workspace,
            wall_segments: boundary_walls(workspace),
            body_radius: 0.05,
            body: Body::PointMass {
                max_speed: 0.15,
                damping: 0.5,
            },
            state_dim: 4,
            action_dim: 2,
            action_bound: 1.0,
            eval_horizon: 200,
            hard_reset_interval: None,
            reset_noise_halfwidth: 0.1,
            start_state: vec![0.0, 0.0, 0.0, 0.0],
            position_dims: vec![0, 1],
            goal_projection: vec![0, 1],
            success_epsilon: 0.25,
            eval_goal: EvalGoalDist::Uniform(Rect::new([2.0, 2.0], [2.8, 2.8])),
            gamma: 0.99,
        }
    }

    /// Walled table: agent `[ax, ay]` pushes object `[ox, oy]` towards a
    /// target patch; corners trap the object.
    pub fn object_arena() -> Self {
        let workspace = Rect::new([-1.5, -1.5], [1.5, 1.5]);
        Self {
            env_id: EnvId::ObjectArena,
            workspace,
            wall_segments: boundary_walls(workspace),
            body_radius: 0.1,
            body: Body::Pusher {
                step: 0.1,
                object_radius: 0.1,
                sink: SinkCornerSpec {
                    corner_radius: 0.3,
                    release_cone_halfangle: 0.3,
                },
            },
            state_dim: 4,
            action_dim: 2,
            action_bound: 1.0,
            eval_horizon: 150,
            hard_reset_interval: Some(50_000),
            reset_noise_halfwidth: 0.1,
            start_state: vec![0.0, -0.5, 0.0, 0.0],
            position_dims: vec![0, 1, 2, 3],
            goal_projection: vec![2, 3],
            success_epsilon: 0.15,
            eval_goal: EvalGoalDist::Uniform(Rect::new([0.6, 0.6], [1.0, 1.0])),
            gamma: 0.99,
        }
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_projection.len()
    }

    /// Where the goal-projected coordinates can physically be.
    pub fn goal_space(&self) -> Rect {
        let r = match self.body {
            Body::PointMass { .. } => self.body_radius,
            Body::Pusher { object_radius, .. } => object_radius,
        };
        self.workspace.inflate(-r)
    }

    /// Forbidden bands of the interior walls for the agent body.
    fn agent_bands(&self) -> impl Iterator<Item = Rect> + '_ {
        self.wall_segments
            .iter()
            .map(move |w| w.forbidden_band(self.body_radius))
    }

    /// `true` if `p` lies strictly inside a wall band or outside the workspace.
    pub fn position_blocked(&self, p: [f64; 2]) -> bool {
        !self.workspace.inflate(-self.body_radius).contains(p)
            || self.agent_bands().any(|b| b.contains_strict(p))
    }

    pub fn project(&self, state: &[f64]) -> Vec<f64> {
        self.goal_projection.iter().map(|&i| state[i]).collect()
    }

    /// Fixed affine map sending positions to roughly `[-1, 1]` and point-mass
    /// velocities to roughly unit scale.
    pub fn state_scale(&self) -> InputScale {
        let c = self.workspace.center();
        let half = [
            (self.workspace.hi[0] - self.workspace.lo[0]) / 2.0,
            (self.workspace.hi[1] - self.workspace.lo[1]) / 2.0,
        ];
        let mut shift = vec![0.0; self.state_dim];
        let mut scale = vec![1.0; self.state_dim];
        let mut axis = 0;
        for i in 0..self.state_dim {
            if self.position_dims.contains(&i) {
                shift[i] = c[axis % 2];
                scale[i] = 1.0 / half[axis % 2];
                axis += 1;
            } else if let Body::PointMass { max_speed, .. } = self.body {
                scale[i] = 1.0 / max_speed;
            }
        }
        InputScale { shift, scale }
    }

    pub fn goal_scale(&self) -> InputScale {
        let s = self.state_scale();
        InputScale {
            shift: self.goal_projection.iter().map(|&i| s.shift[i]).collect(),
            scale: self.goal_projection.iter().map(|&i| s.scale[i]).collect(),
        }
    }

    pub fn make_goal(&self, vec: Vec<f64>) -> GoalVec {
        GoalVec {
            vec,
            projection: self.goal_projection.clone(),
            epsilon: self.success_epsilon,
        }
    }

    pub fn clamp_action(&self, action: &[f64]) -> ActionVec {
        action
            .iter()
            .map(|&a| {
                if a.is_finite() {
                    a.clamp(-self.action_bound, self.action_bound)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Move a body of radius `body_radius` from `p` by `d`, resolving walls
    /// one axis at a time. Returns the new position and which axes hit.
    fn slide(&self, p: [f64; 2], d: [f64; 2]) -> ([f64; 2], [bool; 2]) {
        let inner = self.workspace.inflate(-self.body_radius);
        let mut pos = p;
        let mut hit = [false, false];
        for axis in 0..2 {
            let other = 1 - axis;
            let from = pos[axis];
            let mut to = from + d[axis];
            for band in self.agent_bands() {
                if !(pos[other] > band.lo[other] && pos[other] < band.hi[other]) {
                    continue;
                }
                if to > from && from <= band.lo[axis] && to > band.lo[axis] {
                    to = band.lo[axis];
                    hit[axis] = true;
                } else if to < from && from >= band.hi[axis] && to < band.hi[axis] {
                    to = band.hi[axis];
                    hit[axis] = true;
                }
            }
            let clamped = to.clamp(inner.lo[axis], inner.hi[axis]);
            if clamped != to {
                hit[axis] = true;
            }
            pos[axis] = clamped;
        }
        (pos, hit)
    }

    /// Deterministic transition. Actions are clamped to the action bound.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> EnvState {
        let a = self.clamp_action(action);
        let s = &state.vec;
        let vec = match self.body {
            Body::PointMass { max_speed, damping } => {
                let mut v = [
                    damping * s[2] + (1.0 - damping) * max_speed * a[0],
                    damping * s[3] + (1.0 - damping) * max_speed * a[1],
                ];
                let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
                if speed > max_speed {
                    v = [v[0] * max_speed / speed, v[1] * max_speed / speed];
                }
                let (pos, hit) = self.slide([s[0], s[1]], v);
                for axis in 0..2 {
                    if hit[axis] {
                        v[axis] = 0.0;
                    }
                }
                vec![pos[0], pos[1], v[0], v[1]]
            }
            Body::Pusher {
                step,
                object_radius,
                sink,
            } => self.push_step(s, [a[0] * step, a[1] * step], object_radius, sink),
        };
        EnvState {
            vec,
            step_in_env: state.step_in_env + 1,
        }
    }

    fn object_box(&self, object_radius: f64) -> Rect {
        self.workspace.inflate(-object_radius)
    }

    /// Corner of the object's feasible box within `corner_radius` of `o`.
    pub fn sink_corner(&self, o: [f64; 2]) -> Option<[f64; 2]> {
        let Body::Pusher {
            object_radius,
            sink,
            ..
        } = self.body
        else {
            return None;
        };
        let b = self.object_box(object_radius);
        [
            [b.lo[0], b.lo[1]],
            [b.lo[0], b.hi[1]],
            [b.hi[0], b.lo[1]],
            [b.hi[0], b.hi[1]],
        ]
        .into_iter()
        .find(|c| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() <= sink.corner_radius)
    }

    fn push_step(
        &self,
        s: &[f64],
        d: [f64; 2],
        object_radius: f64,
        sink: SinkCornerSpec,
    ) -> Vec<f64> {
        let agent = [s[0], s[1]];
        let obj = [s[2], s[3]];
        let contact = self.body_radius + object_radius;
        let obox = self.object_box(object_radius);
        let (mut next_agent, _) = self.slide(agent, d);
        let mut next_obj = obj;
        let dist =
            |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();

        if let Some(corner) = self.sink_corner(obj) {
            let centre = self.workspace.center();
            let inward = [centre[0] - corner[0], centre[1] - corner[1]];
            let norm_in = (inward[0] * inward[0] + inward[1] * inward[1]).sqrt();
            let norm_d = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let touching = dist(agent, obj) <= contact + 0.02;
            let within_cone = norm_d > 0.0 && {
                let cos = (d[0] * inward[0] + d[1] * inward[1]) / (norm_d * norm_in);
                cos >= sink.release_cone_halfangle.cos()
            };
            if touching && within_cone {
                next_obj = obox.clamp([obj[0] + d[0], obj[1] + d[1]]);
            }
        } else if dist(next_agent, obj) < contact {
            let mut dir = [obj[0] - next_agent[0], obj[1] - next_agent[1]];
            let n = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
            if n > 1e-12 {
                dir = [dir[0] / n, dir[1] / n];
            } else {
                let nd = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
                dir = [d[0] / nd, d[1] / nd];
            }
            next_obj = obox.clamp([
                next_agent[0] + dir[0] * contact,
                next_agent[1] + dir[1] * contact,
            ]);
        }

        // The agent never overlaps the object once it has settled.
        let gap = dist(next_agent, next_obj);
        if gap < contact {
            let mut dir = [next_agent[0] - next_obj[0], next_agent[1] - next_obj[1]];
            let n = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
            if n > 1e-12 {
                dir = [dir[0] / n, dir[1] / n];
            } else {
                let nd = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
                dir = [-d[0] / nd, -d[1] / nd];
            }
            let target = [
                next_obj[0] + dir[0] * contact,
                next_obj[1] + dir[1] * contact,
            ];
            next_agent = self.workspace.inflate(-self.body_radius).clamp(target);
        }
        vec![next_agent[0], next_agent[1], next_obj[0], next_obj[1]]
    }

    /// Configured start plus uniform noise on position dimensions.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        loop {
            let mut vec = self.start_state.clone();
            if self.reset_noise_halfwidth > 0.0 {
                let h = self.reset_noise_halfwidth;
                for &i in &self.position_dims {
                    vec[i] += rng.gen_range(-h..=h);
                }
            }
            let agent_ok = !self.position_blocked([vec[0], vec[1]]);
            if agent_ok {
                return EnvState {
                    vec,
                    step_in_env: 0,
                };
            }
        }
    }

    pub fn sample_eval_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> GoalVec {
        let vec = match &self.eval_goal {
            EvalGoalDist::Fixed(g) => g.clone(),
            EvalGoalDist::Uniform(rect) => rect.sample(rng).to_vec(),
        };
        self.make_goal(vec)
    }

    /// Projection of a fresh initial-state sample.
    pub fn sample_initial_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> GoalVec {
        let s = self.reset(rng);
        self.make_goal(self.project(&s.vec))
    }

    pub fn sample_uniform_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> GoalVec {
        self.make_goal(self.goal_space().sample(rng).to_vec())
    }

    /// `‖proj(state) - goal‖ ≤ ε`.
    pub fn success(state: &[f64], goal: &GoalVec) -> bool {
        let d2: f64 = goal
            .projection
            .iter()
            .zip(&goal.vec)
            .map(|(&i, &g)| (state[i] - g).powi(2))
            .sum();
        d2.sqrt() <= goal.epsilon
    }

    /// Episodic protocol: reset, sample an evaluation goal, roll `policy` for
    /// `eval_horizon` steps. Success is the any-step indicator, the return is
    /// `Σ_{j=0}^{T} γ^j 1[success(s_j)]`.
    pub fn evaluate_episodic<R, P>(
        &self,
        policy: &mut P,
        n_episodes: usize,
        rng: &mut R,
    ) -> EvalResult
    where
        R: Rng + ?Sized,
        P: FnMut(&[f64], &GoalVec) -> ActionVec,
    {
        if n_episodes == 0 {
            return EvalResult {
                mean_success: 0.0,
                mean_discounted_return: 0.0,
            };
        }
        let mut successes = 0.0;
        let mut returns = 0.0;
        for _ in 0..n_episodes {
            let mut state = self.reset(rng);
            let goal = self.sample_eval_goal(rng);
            let mut reached = Self::success(&state.vec, &goal);
            let mut ret = if reached { 1.0 } else { 0.0 };
            let mut discount = 1.0;
            for _ in 0..self.eval_horizon {
                let action = policy(&state.vec, &goal);
                state = self.step(&state, &action);
                discount *= self.gamma;
                if Self::success(&state.vec, &goal) {
                    reached = true;
                    ret += discount;
                }
            }
            if reached {
                successes += 1.0;
            }
            returns += ret;
        }
        EvalResult {
            mean_success: successes / n_episodes as f64,
            mean_discounted_return: returns / n_episodes as f64,
        }
    }

    /// Boxes over goal coordinates that count as task relevant: the initial
    /// state support and the evaluation goal support.
    pub fn task_relevant_boxes(&self) -> Vec<Rect> {
        let start = self.project(&self.start_state);
        let h = self.reset_noise_halfwidth + self.success_epsilon;
        let start_box = Rect::new([start[0] - h, start[1] - h], [start[0] + h, start[1] + h]);
        let goal_box = match &self.eval_goal {
            EvalGoalDist::Fixed(g) => Rect::new(
                [g[0] - self.success_epsilon, g[1] - self.success_epsilon],
                [g[0] + self.success_epsilon, g[1] + self.success_epsilon],
            ),
            EvalGoalDist::Uniform(r) => r.inflate(self.success_epsilon),
        };
        let space = self.goal_space();
        [start_box, goal_box]
            .into_iter()
            .map(|r| Rect::new(space.clamp(r.lo), space.clamp(r.hi)))
            .collect()
    }

    /// Text occupancy grid: `#` wall, `S` start, `G` evaluation goal, `.` free.
    pub fn render_grid(&self, resolution: usize) -> String {
        let outer = self.workspace.inflate(0.1);
        let cell = [
            (outer.hi[0] - outer.lo[0]) / resolution as f64,
            (outer.hi[1] - outer.lo[1]) / resolution as f64,
        ];
        let start = self.project(&self.start_state);
        let goal_region = match &self.eval_goal {
            EvalGoalDist::Fixed(g) => Rect::new([g[0], g[1]], [g[0], g[1]]),
            EvalGoalDist::Uniform(r) => *r,
        };
        let in_cell = |p: [f64; 2], c: [f64; 2]| {
            (p[0] - c[0]).abs() <= cell[0] / 2.0 && (p[1] - c[1]).abs() <= cell[1] / 2.0
        };
        let mut out = String::new();
        for row in (0..resolution).rev() {
            for col in 0..resolution {
                let c = [
                    outer.lo[0] + (col as f64 + 0.5) * cell[0],
                    outer.lo[1] + (row as f64 + 0.5) * cell[1],
                ];
                let wall = !self.workspace.contains(c)
                    || self
                        .wall_segments
                        .iter()
                        .any(|w| w.forbidden_band(0.0).contains(c));
                let ch = if wall {
                    '#'
                } else if in_cell([start[0], start[1]], c) {
                    'S'
                } else if goal_region.inflate(cell[0] / 2.0).contains(c) {
                    'G'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Live, never-reset environment timeline used for reset-free collection.
#[derive(Debug, Clone)]
pub struct EnvCursor {
    pub spec: EnvSpec,
    pub state: EnvState,
    total_steps: u64,
    resets: Vec<u64>,
}

impl EnvCursor {
    /// Performs the initial hard reset at `t = 0`.
    pub fn new<R: Rng + ?Sized>(spec: EnvSpec, rng: &mut R) -> Self {
        let state = spec.reset(rng);
        Self {
            spec,
            state,
            total_steps: 0,
            resets: vec![0],
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Global step counts at which hard resets happened.
    pub fn resets(&self) -> &[u64] {
        &self.resets
    }

    /// Apply `action`; returns `(s, s_next)`.
    pub fn step(&mut self, action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let next = self.spec.step(&self.state, action);
        let prev = std::mem::replace(&mut self.state, next);
        self.total_steps += 1;
        (prev.vec, self.state.vec.clone())
    }

    /// Hard reset if the schedule says one is due at the current step count.
    pub fn maybe_hard_reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        match self.spec.hard_reset_interval {
            Some(k) if self.total_steps > 0 && self.total_steps.is_multiple_of(k) => {
                if self.resets.last() != Some(&self.total_steps) {
                    self.state = self.spec.reset(rng);
                    self.resets.push(self.total_steps);
                    return true;
                }
                false
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(v: &[f64]) -> EnvState {
        EnvState {
            vec: v.to_vec(),
            step_in_env: 0,
        }
    }

    #[test]
    fn zero_action_at_rest_stays_put() {
        for spec in [EnvSpec::umaze(), EnvSpec::arena()] {
            let s = st(&spec.start_state);
            let n = spec.step(&s, &[0.0, 0.0]);
            assert_eq!(n.vec, spec.start_state);
            assert_eq!(n.step_in_env, 1);
        }
        let spec = EnvSpec::object_arena();
        let s = st(&spec.start_state);
        assert_eq!(spec.step(&s, &[0.0, 0.0]).vec, spec.start_state);
    }

    #[test]
    fn wall_removes_normal_component_and_keeps_tangential() {
        let spec = EnvSpec::umaze();
        // just below the inner wall, moving up and right
        let band = spec
            .wall_segments
            .last()
            .unwrap()
            .forbidden_band(spec.body_radius);
        let y = band.lo[1] - 0.01;
        let s = st(&[1.0, y, 0.1, 0.1]);
        let n = spec.step(&s, &[1.0, 1.0]);
        assert_eq!(n.vec[1], band.lo[1]);
        assert_eq!(n.vec[3], 0.0);
        assert!(n.vec[0] > 1.0);
        assert!(n.vec[2] > 0.0);
    }

    #[test]
    fn actions_are_clamped() {
        let spec = EnvSpec::arena();
        let s = st(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(spec.step(&s, &[50.0, -50.0]), spec.step(&s, &[1.0, -1.0]));
        assert_eq!(spec.step(&s, &[f64::NAN, 0.0]).vec[0], 0.0);
    }

    #[test]
    fn noiseless_reset_is_exact() {
        let mut spec = EnvSpec::umaze();
        spec.reset_noise_halfwidth = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spec.reset(&mut rng).vec, spec.start_state);
    }

    #[test]
    fn reset_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [EnvSpec::umaze(), EnvSpec::arena(), EnvSpec::object_arena()] {
            let n = 1000;
            let mut mean = vec![0.0; spec.state_dim];
            for _ in 0..n {
                let s = spec.reset(&mut rng);
                assert!(!spec.position_blocked([s.vec[0], s.vec[1]]));
                for (i, (&x, &x0)) in s.vec.iter().zip(&spec.start_state).enumerate() {
                    assert!((x - x0).abs() <= 0.1 + 1e-12);
                    mean[i] += x / n as f64;
                }
            }
            for (m, x0) in mean.iter().zip(&spec.start_state) {
                assert!((m - x0).abs() < 0.02, "{} mean {m} vs {x0}", spec.env_id);
            }
        }
    }

    #[test]
    fn eval_goal_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let umaze = EnvSpec::umaze();
        let g0 = umaze.sample_eval_goal(&mut rng);
        for _ in 0..10 {
            assert_eq!(umaze.sample_eval_goal(&mut rng), g0);
        }
        let arena = EnvSpec::arena();
        let EvalGoalDist::Uniform(rect) = arena.eval_goal.clone() else {
            panic!("arena goals are a box")
        };
        for _ in 0..1000 {
            let g = arena.sample_eval_goal(&mut rng);
            assert!(rect.contains([g.vec[0], g.vec[1]]));
        }
        let obj = EnvSpec::object_arena();
        assert_eq!(obj.sample_eval_goal(&mut rng).projection, vec![2, 3]);
    }

    #[test]
    fn success_boundary_is_inclusive() {
        let spec = EnvSpec::arena();
        let g = spec.make_goal(vec![1.0, 1.0]);
        assert!(EnvSpec::success(&[1.0, 1.0, 0.3, 0.3], &g));
        assert!(EnvSpec::success(&[1.0 + 0.25, 1.0, 0.0, 0.0], &g));
        assert!(!EnvSpec::success(&[1.0 + 0.25 + 1e-9, 1.0, 0.0, 0.0], &g));
    }

    #[test]
    fn success_agrees_with_direct_distance() {
        let spec = EnvSpec::object_arena();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let g = spec.make_goal(vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]);
            let d = ((s[2] - g.vec[0]).powi(2) + (s[3] - g.vec[1]).powi(2)).sqrt();
            assert_eq!(EnvSpec::success(&s, &g), d <= 0.15);
        }
    }

    #[test]
    fn sticky_corner_blocks_inward_push_and_releases_in_cone() {
        let spec = EnvSpec::object_arena();
        let corner = [-1.4, -1.4];
        // agent touching the object on the interior side
        let a = [corner[0] + 0.2 / 2f64.sqrt(), corner[1] + 0.2 / 2f64.sqrt()];
        let s = st(&[a[0], a[1], corner[0], corner[1]]);
        let into = spec.step(&s, &[-1.0, -1.0]);
        assert_eq!(&into.vec[2..], &corner);
        let out = spec.step(&s, &[1.0, 1.0]);
        let moved = ((out.vec[2] - corner[0]).powi(2) + (out.vec[3] - corner[1]).powi(2)).sqrt();
        assert!(moved > 0.0);
        // outside the cone (perpendicular) nothing moves
        let side = spec.step(&s, &[1.0, -1.0]);
        assert_eq!(&side.vec[2..], &corner);
    }

    #[test]
    fn release_matches_cone_formula() {
        let spec = EnvSpec::object_arena();
        let Body::Pusher { sink, .. } = spec.body else {
            unreachable!()
        };
        let corner = [-1.4, -1.4];
        let a = [corner[0] + 0.2 / 2f64.sqrt(), corner[1] + 0.2 / 2f64.sqrt()];
        let s = st(&[a[0], a[1], corner[0], corner[1]]);
        for k in 0..72 {
            let theta = k as f64 * std::f64::consts::PI / 36.0;
            let act = [theta.cos(), theta.sin()];
            let inward = std::f64::consts::FRAC_PI_4;
            let mut diff = (theta - inward).abs();
            if diff > std::f64::consts::PI {
                diff = 2.0 * std::f64::consts::PI - diff;
            }
            let n = spec.step(&s, &act);
            let moved = n.vec[2] != corner[0] || n.vec[3] != corner[1];
            assert_eq!(
                moved,
                diff <= sink.release_cone_halfangle + 1e-12,
                "theta {theta}"
            );
        }
    }

    #[test]
    fn pushing_moves_object_away_from_agent() {
        let spec = EnvSpec::object_arena();
        let s = st(&[0.0, -0.25, 0.0, 0.0]);
        let n = spec.step(&s, &[0.0, 1.0]);
        assert!(n.vec[3] > 0.0);
        let gap = ((n.vec[0] - n.vec[2]).powi(2) + (n.vec[1] - n.vec[3]).powi(2)).sqrt();
        assert!(gap >= 0.2 - 1e-9);
    }

    #[test]
    fn zero_policy_fails_umaze() {
        let spec = EnvSpec::umaze();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r =
            spec.evaluate_episodic(&mut |_s: &[f64], _g: &GoalVec| vec![0.0, 0.0], 10, &mut rng);
        assert_eq!(r.mean_success, 0.0);
        assert_eq!(r.mean_discounted_return, 0.0);
    }

    #[test]
    fn render_grid_marks_walls_start_and_goal() {
        let g = EnvSpec::umaze().render_grid(16);
        assert!(g.contains('#') && g.contains('S') && g.contains('G'));
        assert_eq!(g.lines().count(), 16);
    }

    #[test]
    fn hard_reset_schedule() {
        let mut spec = EnvSpec::object_arena();
        spec.hard_reset_interval = Some(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cur = EnvCursor::new(spec, &mut rng);
        for _ in 0..35 {
            cur.step(&[0.3, 0.3]);
            cur.maybe_hard_reset(&mut rng);
        }
        assert_eq!(cur.resets(), &[0, 10, 20, 30]);
    }
}
