use std::fs;
use std::path::Path;

use crate::agents::Agent;
use crate::approx::checkpoint::{
    load_head, load_normalizer, save_head, save_normalizer, CheckpointManifest,
};
use crate::error::{Error, Result};
use crate::world_model::DynamicsEnsemble;
use crate::{AdamState, Mlp, Real};

const HEADS: [&str; 5] = [
    "dnet",
    "goal_policy",
    "goal_value",
    "explore_policy",
    "explore_value",
];

fn heads(agent: &Agent) -> [(&Mlp, &AdamState); 5] {
    [
        (&agent.dnet.net, &agent.dnet.opt),
        (&agent.goal.policy.net, &agent.goal.policy.opt),
        (&agent.goal.value.net, &agent.goal.value.opt),
        (&agent.explore.policy.net, &agent.explore.policy.opt),
        (&agent.explore.value.net, &agent.explore.value.opt),
    ]
}

fn heads_mut(agent: &mut Agent) -> [(&mut Mlp, &mut AdamState); 5] {
    [
        (&mut agent.dnet.net, &mut agent.dnet.opt),
        (&mut agent.goal.policy.net, &mut agent.goal.policy.opt),
        (&mut agent.goal.value.net, &mut agent.goal.value.opt),
        (&mut agent.explore.policy.net, &mut agent.explore.policy.opt),
        (&mut agent.explore.value.net, &mut agent.explore.value.opt),
    ]
}

/// Write every head, optimizer and normalizer of `agent` under `dir`.
pub fn save_agent(agent: &Agent, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CheckpointManifest::new::<Real>();
    for (k, (m, o)) in agent
        .ensemble
        .members()
        .iter()
        .zip(agent.ensemble.optimizers())
        .enumerate()
    {
        manifest
            .heads
            .push(save_head(dir, &format!("ensemble_{k}"), m, o)?);
    }
    for (name, (m, o)) in HEADS.iter().zip(heads(agent)) {
        manifest.heads.push(save_head(dir, name, m, o)?);
    }
    manifest.normalizers.push(save_normalizer(
        dir,
        "ensemble_input",
        agent.ensemble.input_normalizer(),
    )?);
    manifest.normalizers.push(save_normalizer(
        dir,
        "ensemble_delta",
        agent.ensemble.delta_normalizer(),
    )?);
    manifest.write(dir)
}

/// Restore parameters saved by [`save_agent`] into an agent built from the
/// same configuration.
pub fn load_agent_into(agent: &mut Agent, dir: &Path) -> Result<()> {
    let manifest = CheckpointManifest::read(dir)?;
    let missing = |n: &str| Error::format(dir.join("manifest.toml"), format!("missing `{n}`"));
    let mut members = Vec::new();
    let mut opts = Vec::new();
    for k in 0..agent.ensemble.size() {
        let name = format!("ensemble_{k}");
        let rec = manifest.head(&name).ok_or_else(|| missing(&name))?;
        let (m, o) = load_head(dir, rec, agent.ensemble.optimizers()[k].config)?;
        check_shape(&name, &m, &agent.ensemble.members()[k], dir)?;
        members.push(m);
        opts.push(o);
    }
    let norm = |n: &str| {
        manifest
            .normalizers
            .iter()
            .find(|r| r.name == n)
            .ok_or_else(|| missing(n))
            .and_then(|r| load_normalizer(dir, r))
    };
    let input = norm("ensemble_input")?;
    let delta = norm("ensemble_delta")?;
    let steps = opts[0].step_count();
    agent.ensemble = DynamicsEnsemble::from_parts(members, opts, input, delta, steps)?;
    for (name, (m, o)) in HEADS.iter().zip(heads_mut(agent)) {
        let rec = manifest.head(name).ok_or_else(|| missing(name))?;
        let (lm, lo) = load_head(dir, rec, o.config)?;
        check_shape(name, &lm, m, dir)?;
        *m = lm;
        *o = lo;
    }
    Ok(())
}

fn check_shape(name: &str, loaded: &Mlp, expected: &Mlp, dir: &Path) -> Result<()> {
    if loaded.layer_sizes() != expected.layer_sizes() {
        return Err(Error::format(
            dir,
            format!(
                "`{name}` has layout {:?}, configuration expects {:?}",
                loaded.layer_sizes(),
                expected.layer_sizes()
            ),
        ));
    }
    Ok(())
}
