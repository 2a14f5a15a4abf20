use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, HeadConfig};
use crate::approx::HiddenActivation;
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::explore::{GoExploreConfig, Variant};
use crate::rewards::DistanceConfig;
use crate::world_model::EnsembleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub env: EnvId,
    pub variant: Variant,
    pub seed: u64,
    pub total_env_steps: u64,
    pub warmup_steps: u64,
    /// Environment steps per train cycle; per-environment default when unset.
    pub train_ratio: Option<u64>,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub buffer_capacity: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            env: EnvId::UMaze,
            variant: Variant::Morefree,
            seed: 0,
            total_env_steps: 150_000,
            warmup_steps: 1000,
            train_ratio: None,
            eval_every: 5000,
            eval_episodes: 10,
            buffer_capacity: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExploreSection {
    pub alpha: f64,
    /// Default: half the evaluation horizon.
    pub h_go: Option<usize>,
    pub h_explore: Option<usize>,
    pub peg_candidates: usize,
    pub peg_bootstrap: bool,
    pub peg_gamma: f64,
}

impl Default for ExploreSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            h_go: None,
            h_explore: None,
            peg_candidates: 128,
            peg_bootstrap: true,
            peg_gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EnsembleConfig::default();
        Self {
            members: e.members,
            hidden: e.hidden,
            lr: e.lr,
            batch: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub pairs_per_trajectory: usize,
}

impl Default for DistanceSection {
    fn default() -> Self {
        let d = DistanceConfig::default();
        Self {
            hidden: d.hidden,
            lr: d.lr,
            pairs_per_trajectory: d.pairs_per_trajectory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub imag_horizon: usize,
    pub batch: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        Self {
            hidden: h.hidden,
            actor_lr: h.actor_lr,
            critic_lr: h.critic_lr,
            imag_horizon: h.horizon,
            batch: h.batch,
            lambda: h.lambda,
            gamma: h.gamma,
            entropy_coef: h.entropy_coef,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub heatmap_resolution: usize,
    pub checkpoint: bool,
    pub dump_buffer: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            heatmap_resolution: 40,
            checkpoint: true,
            dump_buffer: true,
        }
    }
}

/// Everything a run needs; serialized as TOML with one table per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub explore: ExploreSection,
    pub model: ModelSection,
    pub distance: DistanceSection,
    pub agent: AgentSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parse TOML text, apply `section.key=value` overrides, validate.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = &self.run;
        if r.total_env_steps == 0 || r.eval_every == 0 || r.buffer_capacity == 0 {
            return bad("total_env_steps, eval_every and buffer_capacity must be positive".into());
        }
        if r.train_ratio == Some(0) {
            return bad("train_ratio must be positive".into());
        }
        if self.model.members < 2 {
            return bad("model.members must be at least 2".into());
        }
        if self.model.batch == 0 || self.agent.batch == 0 || self.agent.imag_horizon == 0 {
            return bad("batch sizes and imag_horizon must be positive".into());
        }
        if self.output.heatmap_resolution == 0 {
            return bad("heatmap_resolution must be positive".into());
        }
        self.go_explore().validate()?;
        self.agent_config().goal.validate()
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec::new(self.run.env)
    }

    pub fn train_ratio(&self) -> u64 {
        self.run.train_ratio.unwrap_or(match self.run.env {
            EnvId::Arena => 1,
            EnvId::UMaze | EnvId::ObjectArena => 2,
        })
    }

    pub fn go_explore(&self) -> GoExploreConfig {
        let spec = self.env_spec();
        let base = GoExploreConfig::for_env(&spec, self.run.variant);
        GoExploreConfig {
            h_go: self.explore.h_go.unwrap_or(base.h_go),
            h_explore: self.explore.h_explore.unwrap_or(base.h_explore),
            alpha: self.explore.alpha,
            peg_candidates: self.explore.peg_candidates,
            variant: self.run.variant,
            peg_horizon: self.agent.imag_horizon,
            peg_gamma: self.explore.peg_gamma,
            peg_bootstrap: self.explore.peg_bootstrap,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        let a = &self.agent;
        let head = HeadConfig {
            hidden: a.hidden.clone(),
            activation: HiddenActivation::Elu,
            actor_lr: a.actor_lr,
            critic_lr: a.critic_lr,
            horizon: a.imag_horizon,
            batch: a.batch,
            gamma: a.gamma,
            lambda: a.lambda,
            entropy_coef: a.entropy_coef,
            ..HeadConfig::default()
        };
        AgentConfig {
            ensemble: EnsembleConfig {
                members: self.model.members,
                hidden: self.model.hidden.clone(),
                lr: self.model.lr,
                ..EnsembleConfig::default()
            },
            distance: DistanceConfig {
                hidden: self.distance.hidden.clone(),
                lr: self.distance.lr,
                max_horizon: a.imag_horizon,
                pairs_per_trajectory: self.distance.pairs_per_trajectory,
                ..DistanceConfig::default()
            },
            goal: head.clone(),
            explore: head,
            model_batch: self.model.batch,
        }
    }
}

/// Set `section.key` (or a top-level key) to `value`, parsed as a TOML value
/// when possible and as a string otherwise.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    Err(Error::Config("empty override key".into()))
}
