//! Replay storage with provenance tags.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, GoalVec, Rect};
use crate::error::{check_dim, Error, Result};

/// Which collection phase produced a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Go phase towards an evaluation goal ("forward").
    GoTask,
    /// Go phase towards an initial-state goal ("back").
    GoBack,
    /// Go phase towards an exploratory goal.
    GoExpl,
    /// Exploration policy, warmup or random actions.
    Explore,
    /// Evaluation rollouts; never stored.
    EvalExcluded,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::GoTask,
        Phase::GoBack,
        Phase::GoExpl,
        Phase::Explore,
        Phase::EvalExcluded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::GoTask => "go_task",
            Phase::GoBack => "go_back",
            Phase::GoExpl => "go_expl",
            Phase::Explore => "explore",
            Phase::EvalExcluded => "eval_excluded",
        }
    }

    fn code(self) -> u8 {
        Phase::ALL.iter().position(|&p| p == self).expect("listed") as u8
    }

    fn from_code(c: u8) -> Option<Phase> {
        Phase::ALL.get(c as usize).copied()
    }

    pub fn is_go(self) -> bool {
        matches!(self, Phase::GoTask | Phase::GoBack | Phase::GoExpl)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub global_step: u64,
    pub traj_id: u64,
    pub phase: Phase,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    data: Vec<Transition>,
    head: usize,
    total_inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            state_dim,
            action_dim,
            data: Vec::new(),
            head: 0,
            total_inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.data.split_at(self.head);
        older.iter().chain(newer)
    }

    /// Transition by logical index (0 = oldest).
    pub fn get(&self, i: usize) -> Option<&Transition> {
        if i >= self.data.len() {
            return None;
        }
        let idx = if self.data.len() < self.capacity {
            i
        } else {
            (self.head + i) % self.capacity
        };
        self.data.get(idx)
    }

    pub fn insert(&mut self, t: Transition) -> Result<()> {
        check_dim("transition state", self.state_dim, t.s.len())?;
        check_dim("transition next state", self.state_dim, t.s_next.len())?;
        check_dim("transition action", self.action_dim, t.a.len())?;
        if t.phase == Phase::EvalExcluded {
            return Err(Error::Provenance(
                "evaluation transitions are never stored".into(),
            ));
        }
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.total_inserted += 1;
        Ok(())
    }

    /// Uniform i.i.d. sample with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.data.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| &self.data[rng.gen_range(0..self.data.len())])
            .collect())
    }

    /// Achieved states (`s_next`) sampled uniformly.
    pub fn sample_states<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .sample_batch(n, rng)?
            .into_iter()
            .map(|t| t.s_next.clone())
            .collect())
    }

    /// Achieved states projected into goal space.
    pub fn sample_states_as_goals<R: Rng + ?Sized>(
        &self,
        n: usize,
        env: &EnvSpec,
        rng: &mut R,
    ) -> Result<Vec<GoalVec>> {
        Ok(self
            .sample_batch(n, rng)?
            .into_iter()
            .map(|t| env.make_goal(env.project(&t.s_next)))
            .collect())
    }

    /// Histogram of two state dimensions (of `s_next`) over `bounds`; row 0 is
    /// the bottom of `bounds`. Points outside are clamped into edge cells.
    pub fn visitation_grid(
        &self,
        dims: (usize, usize),
        resolution: usize,
        bounds: Rect,
    ) -> Vec<Vec<u64>> {
        let res = resolution.max(1);
        let mut grid = vec![vec![0u64; res]; res];
        let cell = |v: f64, lo: f64, hi: f64| -> usize {
            let f = ((v - lo) / (hi - lo) * res as f64).floor();
            if f.is_nan() || f < 0.0 {
                0
            } else {
                (f as usize).min(res - 1)
            }
        };
        for t in self.iter() {
            let x = cell(t.s_next[dims.0], bounds.lo[0], bounds.hi[0]);
            let y = cell(t.s_next[dims.1], bounds.lo[1], bounds.hi[1]);
            grid[y][x] += 1;
        }
        grid
    }

    pub fn phase_counts(&self) -> Vec<(Phase, usize)> {
        Phase::ALL
            .into_iter()
            .map(|p| (p, self.iter().filter(|t| t.phase == p).count()))
            .collect()
    }

    /// Writes `transitions.bin` and `buffer.toml` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        for t in self.iter() {
            for v in t.s.iter().chain(&t.a).chain(&t.s_next) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&t.global_step.to_le_bytes());
            bytes.extend_from_slice(&t.traj_id.to_le_bytes());
            bytes.push(t.phase.code());
        }
        let path = dir.join("transitions.bin");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let manifest = BufferManifest {
            format_version: 1,
            capacity: self.capacity,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            count: self.len(),
            total_inserted: self.total_inserted,
        };
        let path = dir.join("buffer.toml");
        let text =
            toml::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("buffer.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BufferManifest =
            toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let path = dir.join("transitions.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let floats = 2 * m.state_dim + m.action_dim;
        let rec = floats * 8 + 8 + 8 + 1;
        if bytes.len() != rec * m.count {
            return Err(Error::format(&path, "size does not match manifest"));
        }
        let mut buf = ReplayBuffer::new(m.capacity, m.state_dim, m.action_dim);
        for chunk in bytes.chunks_exact(rec) {
            let f =
                |i: usize| f64::from_le_bytes(chunk[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
            let vals: Vec<f64> = (0..floats).map(f).collect();
            let off = floats * 8;
            let u = |o: usize| u64::from_le_bytes(chunk[o..o + 8].try_into().expect("8 bytes"));
            let phase = Phase::from_code(chunk[off + 16])
                .ok_or_else(|| Error::format(&path, "bad phase code"))?;
            buf.insert(Transition {
                s: vals[..m.state_dim].to_vec(),
                a: vals[m.state_dim..m.state_dim + m.action_dim].to_vec(),
                s_next: vals[m.state_dim + m.action_dim..].to_vec(),
                global_step: u(off),
                traj_id: u(off + 8),
                phase,
            })?;
        }
        buf.total_inserted = m.total_inserted;
        Ok(buf)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferManifest {
    format_version: u32,
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    count: usize,
    total_inserted: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: u64) -> Transition {
        Transition {
            s: vec![i as f64, 0.0],
            a: vec![0.5],
            s_next: vec![i as f64 + 0.5, 1.0],
            global_step: i,
            traj_id: i,
            phase: Phase::Explore,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2, 2, 1);
        for i in 0..3 {
            b.insert(tr(i)).unwrap();
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.total_inserted(), 3);
        let steps: Vec<u64> = b.iter().map(|t| t.global_step).collect();
        assert_eq!(steps, vec![1, 2]);
        assert_eq!(b.get(0).unwrap(), &tr(1));
        assert_eq!(b.get(1).unwrap(), &tr(2));
    }

    #[test]
    fn inserted_transition_is_retrievable() {
        let mut b = ReplayBuffer::new(10, 2, 1);
        let t = Transition {
            s: vec![0.1 + 0.2, -0.0],
            ..tr(4)
        };
        b.insert(t.clone()).unwrap();
        let got = b.get(0).unwrap();
        assert_eq!(got.s[0].to_bits(), t.s[0].to_bits());
        assert_eq!(got.s[1].to_bits(), t.s[1].to_bits());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(10, 2, 1);
        assert!(matches!(
            b.sample_batch(3, &mut rng),
            Err(Error::EmptyBuffer)
        ));
        b.insert(tr(7)).unwrap();
        assert!(b.sample_batch(0, &mut rng).unwrap().is_empty());
        let s = b.sample_batch(5, &mut rng).unwrap();
        assert!(s.iter().all(|t| **t == tr(7)));
    }

    #[test]
    fn rejects_bad_dims_and_eval_rows() {
        let mut b = ReplayBuffer::new(10, 2, 1);
        assert!(b.insert(Transition { a: vec![], ..tr(0) }).is_err());
        assert!(b
            .insert(Transition {
                phase: Phase::EvalExcluded,
                ..tr(0)
            })
            .is_err());
    }

    #[test]
    fn visitation_grid_edge_cases() {
        let bounds = Rect::new([0.0, 0.0], [10.0, 2.0]);
        let mut b = ReplayBuffer::new(10, 2, 1);
        let g = b.visitation_grid((0, 1), 4, bounds);
        assert!(g.iter().flatten().all(|&c| c == 0));
        b.insert(tr(3)).unwrap();
        let g = b.visitation_grid((0, 1), 4, bounds);
        assert_eq!(g.iter().flatten().sum::<u64>(), 1);
        assert_eq!(g[2][1], 1);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ReplayBuffer::new(3, 2, 1);
        for i in 0..5 {
            let mut t = tr(i);
            t.phase = Phase::ALL[(i % 4) as usize];
            b.insert(t).unwrap();
        }
        b.dump(dir.path()).unwrap();
        let back = ReplayBuffer::load(dir.path()).unwrap();
        assert_eq!(back.total_inserted(), 5);
        assert_eq!(
            back.iter().collect::<Vec<_>>(),
            b.iter().collect::<Vec<_>>()
        );
    }
}
