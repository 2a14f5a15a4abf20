use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, CycleReport, ImaginationGoalMixture};
use crate::buffer::{Phase, ReplayBuffer, Transition};
use crate::envs::{EnvCursor, EnvSpec, EvalResult};
use crate::error::{Error, Result};
use crate::explore::{AgentPolicies, Collector, CollectorEvent, GoExploreConfig, RandomPolicies};

use super::config::ExperimentConfig;
use super::heatmap::emit_heatmap;
use super::metrics::{
    metrics_header, metrics_line, regret_proxy, task_relevant_fraction, MetricsRow,
};
use super::persist::save_agent;

/// RNG stream ids; each consumer owns one stream of the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_COLLECT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_PROBE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Non-finite step counters per learner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipCounters {
    pub model: u64,
    pub distance: u64,
    pub goal: u64,
    pub explore: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub variant: String,
    pub seed: u64,
    pub env_steps: u64,
    pub train_cycles: u64,
    pub final_success: f64,
    pub final_return: f64,
    pub best_return: f64,
    pub task_relevant_fraction: f64,
    pub regret_proxy: f64,
    pub buffer_len: usize,
    pub resets: Vec<u64>,
    pub branch_counts: [u64; 4],
    pub skipped: SkipCounters,
}

#[derive(Default)]
struct Accum {
    n: f64,
    sums: [f64; 9],
}

impl Accum {
    fn add(&mut self, r: &CycleReport) {
        let model = r.model_losses.iter().sum::<f64>() / r.model_losses.len().max(1) as f64;
        let vals = [
            model,
            r.distance_loss.unwrap_or(f64::NAN),
            r.goal.actor_loss,
            r.goal.critic_loss,
            r.goal.entropy,
            r.explore.actor_loss,
            r.explore.critic_loss,
            r.explore.entropy,
            0.0,
        ];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.n += 1.0;
    }

    fn mean(&self, i: usize) -> f64 {
        if self.n == 0.0 {
            f64::NAN
        } else {
            self.sums[i] / self.n
        }
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    log: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        let mut metrics = open("metrics.csv")?;
        metrics
            .write_all(metrics_header().as_bytes())
            .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            log: open("log.jsonl")?,
        })
    }

    fn log(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).expect("log records serialize");
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("log.jsonl"), e))
    }
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum RunEvent<'a> {
    HardReset {
        env_step: u64,
    },
    Eval {
        env_step: u64,
        success: f64,
        discounted_return: f64,
    },
    #[serde(untagged)]
    Collector(&'a CollectorEvent),
}

/// The training loop as a resumable state machine.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub spec: EnvSpec,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub cursor: EnvCursor,
    collector: Collector,
    go_cfg: GoExploreConfig,
    mixture: ImaginationGoalMixture,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    rows: Vec<MetricsRow>,
    accum: Accum,
    train_cycles: u64,
    regret_points: Vec<(u64, f64)>,
    outputs: Option<Outputs>,
    pub verbose: bool,
}

impl Trainer {
    /// In-memory run; nothing is written.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.env_spec();
        let seed = cfg.run.seed;
        let mut init = stream(seed, STREAM_INIT);
        let agent = Agent::new(&spec, &cfg.agent_config(), &mut init)?;
        let mut collect_rng = stream(seed, STREAM_COLLECT);
        let cursor = EnvCursor::new(spec.clone(), &mut collect_rng);
        let go_cfg = cfg.go_explore();
        let collector = Collector::new(go_cfg.clone())?;
        let mixture =
            ImaginationGoalMixture::new(cfg.run.variant.imagination_alpha(cfg.explore.alpha))?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.run.buffer_capacity, spec.state_dim, spec.action_dim),
            spec,
            agent,
            cursor,
            collector,
            go_cfg,
            mixture,
            collect_rng,
            train_rng: stream(seed, STREAM_TRAIN),
            eval_rng: stream(seed, STREAM_EVAL),
            rows: Vec::new(),
            accum: Accum::default(),
            train_cycles: 0,
            regret_points: Vec::new(),
            outputs: None,
            verbose: false,
            cfg,
        })
    }

    /// Run that writes config, metrics and log files under `cfg.output.dir`.
    pub fn with_output(cfg: ExperimentConfig) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.outputs = Some(Outputs::create(&t.cfg.output.dir.clone(), &t.cfg)?);
        Ok(t)
    }

    pub fn env_steps(&self) -> u64 {
        self.cursor.total_steps()
    }

    pub fn train_cycles(&self) -> u64 {
        self.train_cycles
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn is_done(&self) -> bool {
        self.env_steps() >= self.cfg.run.total_env_steps
    }

    fn steps_to_boundary(&self) -> u64 {
        let t = self.env_steps();
        let end = self.cfg.run.total_env_steps.max(t);
        match self.spec.hard_reset_interval {
            Some(k) => ((t / k + 1) * k).min(end) - t,
            None => end - t,
        }
    }

    /// One environment step, then the scheduled hard reset, train cycle and
    /// evaluation, in that order.
    pub fn step(&mut self) -> Result<()> {
        let warmup = self.cfg.run.warmup_steps;
        let boundary = self.steps_to_boundary();
        let mut events = Vec::new();
        if self.env_steps() < warmup {
            let a = RandomPolicies::for_env(&self.spec).sample(&mut self.collect_rng);
            let (s, s_next) = self.cursor.step(&a);
            self.buffer.insert(Transition {
                s,
                a,
                s_next,
                global_step: self.cursor.total_steps(),
                traj_id: 0,
                phase: Phase::Explore,
            })?;
        } else if !self.cfg.run.variant.trains() {
            let mut pol = RandomPolicies::for_env(&self.spec);
            events = self
                .collector
                .step(
                    &mut self.cursor,
                    &mut pol,
                    &mut self.buffer,
                    boundary,
                    &mut self.collect_rng,
                )?
                .events;
        } else {
            let mut pol = AgentPolicies {
                agent: &self.agent,
                cfg: &self.go_cfg,
            };
            events = self
                .collector
                .step(
                    &mut self.cursor,
                    &mut pol,
                    &mut self.buffer,
                    boundary,
                    &mut self.collect_rng,
                )?
                .events;
        }
        if let Some(o) = &mut self.outputs {
            for e in &events {
                o.log(&RunEvent::Collector(e))?;
            }
        }
        let t = self.env_steps();
        if self.cursor.maybe_hard_reset(&mut self.collect_rng) {
            if let Some(o) = &mut self.outputs {
                o.log(&RunEvent::HardReset { env_step: t })?;
            }
        }
        let n = self.cfg.train_ratio();
        if self.cfg.run.variant.trains() && t > warmup && (t - warmup).is_multiple_of(n) {
            let report = self.agent.train_cycle(
                &self.buffer,
                &self.spec,
                &self.mixture,
                &mut self.train_rng,
            )?;
            self.accum.add(&report);
            self.train_cycles += 1;
        }
        if t.is_multiple_of(self.cfg.run.eval_every) || t == self.cfg.run.total_env_steps {
            self.record_eval()?;
        }
        Ok(())
    }

    /// Episodic evaluation of the deterministic goal policy (uniform random
    /// actions for the random variant). Does not touch the buffer, the live
    /// environment or any learned state.
    pub fn evaluate(&mut self) -> EvalResult {
        let episodes = self.cfg.run.eval_episodes;
        if self.cfg.run.variant.trains() {
            let policy = &self.agent.goal.policy;
            let mut act = |s: &[f64], g: &crate::envs::GoalVec| {
                policy
                    .mean_actions(s, Some(&g.vec), 1)
                    .expect("goal policy dimensions fixed at construction")
            };
            self.spec
                .evaluate_episodic(&mut act, episodes, &mut self.eval_rng)
        } else {
            let random = RandomPolicies::for_env(&self.spec);
            let mut action_rng = stream(self.cfg.run.seed ^ self.env_steps(), STREAM_EVAL);
            let mut act = |_s: &[f64], _g: &crate::envs::GoalVec| random.sample(&mut action_rng);
            self.spec
                .evaluate_episodic(&mut act, episodes, &mut self.eval_rng)
        }
    }

    /// Mean disagreement with zero action at evaluation-goal states.
    fn eval_goal_disagreement(&self) -> Result<f64> {
        let mut rng = stream(self.cfg.run.seed ^ self.env_steps(), STREAM_PROBE);
        let n = 32;
        let mut s = Vec::with_capacity(n * self.spec.state_dim);
        for _ in 0..n {
            let g = self.spec.sample_eval_goal(&mut rng);
            let mut st = self.spec.start_state.clone();
            for (&i, v) in self.spec.goal_projection.iter().zip(&g.vec) {
                st[i] = *v;
            }
            s.extend(st);
        }
        let a = vec![0.0; n * self.spec.action_dim];
        let d = self.agent.ensemble.disagreement_batch(&s, &a, n)?;
        Ok(d.iter().sum::<f64>() / n as f64)
    }

    fn record_eval(&mut self) -> Result<()> {
        let t = self.env_steps();
        let before = self.buffer.len();
        let res = self.evaluate();
        debug_assert_eq!(before, self.buffer.len());
        self.regret_points.push((t, res.mean_discounted_return));
        let best = self
            .regret_points
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let row = MetricsRow {
            env_step: t,
            eval_success: res.mean_success,
            eval_return: res.mean_discounted_return,
            task_relevant_fraction: task_relevant_fraction(
                &self.buffer,
                &self.spec.goal_projection,
                &self.spec.task_relevant_boxes(),
            ),
            model_loss: self.accum.mean(0),
            distance_loss: self.accum.mean(1),
            goal_actor_loss: self.accum.mean(2),
            goal_critic_loss: self.accum.mean(3),
            goal_entropy: self.accum.mean(4),
            explore_actor_loss: self.accum.mean(5),
            explore_critic_loss: self.accum.mean(6),
            explore_entropy: self.accum.mean(7),
            eval_goal_disagreement: self.eval_goal_disagreement()?,
            buffer_size: self.buffer.len(),
            train_cycles: self.train_cycles,
            resets: self.cursor.resets().len(),
            cumulative_regret_proxy: regret_proxy(&self.regret_points, best),
        };
        self.accum = Accum::default();
        if self.verbose {
            eprintln!(
                "step {:>8}  success {:.2}  return {:6.3}  task-relevant {:.3}  cycles {}",
                row.env_step,
                row.eval_success,
                row.eval_return,
                row.task_relevant_fraction,
                row.train_cycles
            );
        }
        if let Some(o) = &mut self.outputs {
            o.log(&RunEvent::Eval {
                env_step: t,
                success: res.mean_success,
                discounted_return: res.mean_discounted_return,
            })?;
            o.metrics
                .write_all(metrics_line(&row).as_bytes())
                .map_err(|e| Error::io(o.dir.join("metrics.csv"), e))?;
            o.metrics
                .flush()
                .map_err(|e| Error::io(o.dir.join("metrics.csv"), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Step until the configured budget is exhausted.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.rows.last();
        let opt_skips =
            |a: &crate::agents::ActorCritic| a.policy.opt.skipped() + a.value.opt.skipped();
        RunSummary {
            env: self.spec.env_id.to_string(),
            variant: self.cfg.run.variant.to_string(),
            seed: self.cfg.run.seed,
            env_steps: self.env_steps(),
            train_cycles: self.train_cycles,
            final_success: last.map_or(0.0, |r| r.eval_success),
            final_return: last.map_or(0.0, |r| r.eval_return),
            best_return: self.regret_points.iter().map(|p| p.1).fold(0.0, f64::max),
            task_relevant_fraction: task_relevant_fraction(
                &self.buffer,
                &self.spec.goal_projection,
                &self.spec.task_relevant_boxes(),
            ),
            regret_proxy: last.map_or(0.0, |r| r.cumulative_regret_proxy),
            buffer_len: self.buffer.len(),
            resets: self.cursor.resets().to_vec(),
            branch_counts: self.collector.branch_counts(),
            skipped: SkipCounters {
                model: self.agent.ensemble.skipped_steps(),
                distance: self.agent.dnet.skipped_steps(),
                goal: opt_skips(&self.agent.goal),
                explore: opt_skips(&self.agent.explore),
            },
        }
    }

    /// Flush logs and write the checkpoint, buffer dump, heatmap and summary.
    pub fn finish(mut self) -> Result<RunSummary> {
        let summary = self.summary();
        let Some(mut o) = self.outputs.take() else {
            return Ok(summary);
        };
        o.log
            .flush()
            .map_err(|e| Error::io(o.dir.join("log.jsonl"), e))?;
        o.metrics
            .flush()
            .map_err(|e| Error::io(o.dir.join("metrics.csv"), e))?;
        let dir = o.dir.clone();
        if self.cfg.output.checkpoint {
            save_agent(&self.agent, &dir.join("checkpoint"))?;
        }
        if self.cfg.output.dump_buffer {
            self.buffer.dump(&dir.join("checkpoint").join("buffer"))?;
        }
        emit_heatmap(
            &self.buffer,
            &self.spec,
            &self.spec.task_relevant_boxes(),
            self.cfg.output.heatmap_resolution,
            &dir,
            "heatmap",
        )?;
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    }
}

/// Train from `cfg`, writing every artifact under `cfg.output.dir`.
pub fn train(cfg: ExperimentConfig) -> Result<RunSummary> {
    let mut t = Trainer::with_output(cfg)?;
    t.run_to_end()?;
    t.finish()
}

/// Same as [`train`] with progress lines on stderr.
pub fn train_verbose(cfg: ExperimentConfig) -> Result<RunSummary> {
    let mut t = Trainer::with_output(cfg)?;
    t.verbose = true;
    t.run_to_end()?;
    t.finish()
}
