//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line (outside
//! the test harness's output capture) before asserting.
//!
//! The two long-running reproduction criteria are `#[ignore]`d; run them with
//! `cargo test --release -p morefree --test acceptance -- --ignored`.

use std::io::Write;

use morefree::agents::{
    Agent, AgentConfig, GoalSource, HeadConfig, ImagBatch, ImagReward, ImaginationGoalMixture,
};
use morefree::approx::{grad_check, lambda_returns};
use morefree::buffer::{Phase, ReplayBuffer, Transition};
use morefree::envs::{EnvCursor, EnvSpec, InputScale};
use morefree::explore::{
    peg_goal, Branch, Collector, CollectorEvent, GoExploreConfig, PegConfig, RandomPolicies,
    Variant,
};
use morefree::harness::{ExperimentConfig, Trainer};
use morefree::rewards::{DistanceConfig, DistanceNet};
use morefree::world_model::{DynamicsEnsemble, EnsembleConfig, ImaginedTrajectory, RolloutSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {id:>2} {verdict} {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random_transitions(spec: &EnvSpec, n: usize, seed: u64) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = EnvCursor::new(spec.clone(), &mut rng);
    let mut buf = ReplayBuffer::new(n, spec.state_dim, spec.action_dim);
    let random = RandomPolicies::for_env(spec);
    for _ in 0..n {
        let a = random.sample(&mut rng);
        let (s, s_next) = cur.step(&a);
        buf.insert(Transition {
            s,
            a,
            s_next,
            global_step: cur.total_steps(),
            traj_id: 0,
            phase: Phase::Explore,
        })
        .unwrap();
    }
    buf
}

#[test]
fn c01_gradient_suite() {
    let spec = EnvSpec::umaze();
    let head = HeadConfig {
        hidden: vec![16, 16],
        horizon: 5,
        batch: 6,
        entropy_coef: 0.05,
        ..HeadConfig::default()
    };
    let cfg = AgentConfig {
        ensemble: EnsembleConfig {
            members: 3,
            hidden: vec![16, 16],
            ..EnsembleConfig::default()
        },
        distance: DistanceConfig {
            hidden: vec![16, 16],
            max_horizon: 5,
            ..DistanceConfig::default()
        },
        goal: head.clone(),
        explore: head,
        model_batch: 32,
    };
    let (step, floor) = (1e-5, 1e-6);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agent = Agent::new(&spec, &cfg, &mut rng).unwrap();
        let buf = random_transitions(&spec, 500, seed);
        for _ in 0..20 {
            let batch = buf.sample_batch(32, &mut rng).unwrap();
            agent.ensemble.train_model_step(&batch).unwrap();
        }
        let batch = buf.sample_batch(16, &mut rng).unwrap();

        for k in 0..agent.ensemble.size() {
            let (_, g) = agent.ensemble.member_loss_and_grads(k, &batch).unwrap();
            let ens = &agent.ensemble;
            let e = grad_check(
                ens.members()[k].params(),
                &g,
                |p| {
                    let mut c = ens.clone();
                    c.members_mut()[k].params_mut().copy_from_slice(p);
                    c.member_loss_and_grads(k, &batch).unwrap().0
                },
                step,
                floor,
            );
            note("dynamics member", e);
        }

        let s: Vec<f64> = batch.iter().flat_map(|t| t.s.clone()).collect();
        let g: Vec<f64> = batch.iter().flat_map(|t| spec.project(&t.s_next)).collect();
        let target: Vec<f64> = (0..batch.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, gd) = agent.dnet.loss_and_grads(&s, &g, &target).unwrap();
        let dnet = &agent.dnet;
        let e = grad_check(
            dnet.net.params(),
            &gd,
            |p| {
                let mut c = dnet.clone();
                c.net.params_mut().copy_from_slice(p);
                c.loss_and_grads(&s, &g, &target).unwrap().0
            },
            step,
            floor,
        );
        note("distance", e);

        let starts = buf.sample_states(6, &mut rng).unwrap();
        let goals: Vec<Vec<f64>> = (0..6)
            .map(|_| spec.sample_uniform_goal(&mut rng).vec)
            .collect();
        let limit = agent.divergence_limit();
        for (name_a, name_c, ac, reward, goals) in [
            (
                "goal actor",
                "goal critic",
                &agent.goal,
                ImagReward::Distance(&agent.dnet),
                Some(goals.clone()),
            ),
            (
                "explore actor",
                "explore critic",
                &agent.explore,
                ImagReward::Disagreement,
                None,
            ),
        ] {
            let ib = ImagBatch::sample(starts.clone(), goals, 5, 2, &mut rng);
            let ens = &agent.ensemble;
            let (_, ga, gc) = ac.gradients(ens, reward, &ib, limit).unwrap();
            let e = grad_check(
                ac.policy.net.params(),
                &ga,
                |p| {
                    let mut c = ac.clone();
                    c.policy.net.params_mut().copy_from_slice(p);
                    c.actor_loss(ens, reward, &ib, limit).unwrap()
                },
                step,
                floor,
            );
            note(name_a, e);
            let ct = ac.critic_targets(ens, reward, &ib, limit).unwrap();
            let e = grad_check(
                ac.value.net.params(),
                &gc,
                |p| {
                    let mut c = ac.value.clone();
                    c.net.params_mut().copy_from_slice(p);
                    c.critic_loss(&ct.states, ct.goals.as_deref(), &ct.targets, &ct.weights)
                        .unwrap()
                },
                step,
                floor,
            );
            note(name_c, e);
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let pass = max < 1e-4;
    report(
        1,
        "gradient suite, 10 seeds, max rel err < 1e-4",
        pass,
        &detail.join(", "),
    );
    assert!(pass);
}

/// `R^λ_t = (1-λ) Σ_{n=1}^{H-t-1} λ^{n-1} G^(n)_t + λ^{H-t-1} G^(H-t)_t`.
fn brute_force_lambda_return(r: &[f64], v: &[f64], gamma: f64, lambda: f64, t: usize) -> f64 {
    let h = r.len();
    let n_step = |n: usize| {
        let mut g = 0.0;
        for k in 0..n {
            g += gamma.powi(k as i32) * r[t + k];
        }
        g + gamma.powi(n as i32) * v[t + n]
    };
    let mut total = 0.0;
    for n in 1..(h - t) {
        total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
    }
    total + lambda.powi((h - t - 1) as i32) * n_step(h - t)
}

#[test]
fn c02_lambda_return_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let h = rng.gen_range(1..=20);
        let r: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let gamma = rng.gen_range(0.8..1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let fast = lambda_returns(&r, &v, gamma, lambda).unwrap();
        for (t, x) in fast.iter().enumerate() {
            worst = worst.max((x - brute_force_lambda_return(&r, &v, gamma, lambda, t)).abs());
        }
    }
    let pass = worst <= 1e-10;
    report(
        2,
        "lambda-returns vs brute force, 100 sequences",
        pass,
        &format!("max abs err {worst:.1e}"),
    );
    assert!(pass);
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

#[test]
fn c03_distance_on_chain() {
    // s' = s + 1 on the integers 0..=40
    let h = 15;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scale = InputScale {
        shift: vec![20.0],
        scale: vec![0.05],
    };
    let cfg = DistanceConfig {
        max_horizon: h,
        ..DistanceConfig::default()
    };
    let mut dnet = DistanceNet::new(scale.clone(), scale, vec![0], &cfg, &mut rng).unwrap();
    for _ in 0..2000 {
        let trajs: Vec<ImaginedTrajectory> = (0..16)
            .map(|_| {
                let s0 = rng.gen_range(0..=25) as f64;
                ImaginedTrajectory {
                    states: (0..=h).map(|k| vec![s0 + k as f64]).collect(),
                    actions: vec![vec![1.0]; h],
                    rewards: vec![0.0; h],
                    goal: None,
                    source: RolloutSource::GoalPolicy,
                    truncated: false,
                }
            })
            .collect();
        dnet.train_distance_step(&trajs, &mut rng).unwrap();
    }
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for s in (0..=25).step_by(5) {
        for k in 0..=h {
            pred.push(dnet.distance(&[s as f64], &[(s + k) as f64]).unwrap());
            truth.push(k as f64);
        }
    }
    let rho = spearman(&pred, &truth);
    let mid: Vec<f64> = (1..=10)
        .map(|k| dnet.distance(&[10.0], &[10.0 + k as f64]).unwrap())
        .collect();
    let rho_mid = spearman(&mid, &(1..=10).map(|k| k as f64).collect::<Vec<_>>());
    let pass = rho >= 0.8 && rho_mid >= 0.95;
    report(
        3,
        "distance on 1D chain after 2k steps",
        pass,
        &format!("spearman {rho:.3} (>= 0.8), k=1..10 from s=10 {rho_mid:.3} (>= 0.95)"),
    );
    assert!(pass);
}

#[test]
fn c04_novelty_ordering() {
    let spec = EnvSpec::arena();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cur = EnvCursor::new(spec.clone(), &mut rng);
    let mut buf = ReplayBuffer::new(20_000, 4, 2);
    let random = RandomPolicies::for_env(&spec);
    let mut a = random.sample(&mut rng);
    while buf.len() < 20_000 {
        if cur.total_steps().is_multiple_of(5) {
            a = random.sample(&mut rng);
        }
        // keep the agent in the left half
        if cur.state.vec[0] > -0.2 {
            a[0] = -a[0].abs();
        }
        let (s, s_next) = cur.step(&a);
        if s_next[0] < 0.0 {
            buf.insert(Transition {
                s,
                a: a.clone(),
                s_next,
                global_step: cur.total_steps(),
                traj_id: 0,
                phase: Phase::Explore,
            })
            .unwrap();
        }
    }
    let mut ens = DynamicsEnsemble::new(
        4,
        2,
        &EnsembleConfig {
            hidden: vec![64, 64],
            ..EnsembleConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    for _ in 0..3000 {
        let batch = buf.sample_batch(128, &mut rng).unwrap();
        ens.train_model_step(&batch).unwrap();
    }
    let probe = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        let n = 500;
        let s: Vec<f64> = (0..n)
            .flat_map(|_| [rng.gen_range(lo..hi), rng.gen_range(-2.9..2.9), 0.0, 0.0])
            .collect();
        let a: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ens.disagreement_batch(&s, &a, n)
            .unwrap()
            .iter()
            .sum::<f64>()
            / n as f64
    };
    let left = probe(-2.9, -0.1, &mut rng);
    let right = probe(0.1, 2.9, &mut rng);
    let ratio = right / left;

    // Go: head straight for the goal; Explore: keep moving right-ward at random.
    let mut go = |s: &[f64], g: Option<&[f64]>, n: usize| {
        let g = g.unwrap();
        (0..n)
            .flat_map(|i| {
                let d = [g[2 * i] - s[4 * i], g[2 * i + 1] - s[4 * i + 1]];
                let m = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
                [d[0] / m, d[1] / m]
            })
            .collect::<Vec<f64>>()
    };
    let mut explore = |_s: &[f64], _g: Option<&[f64]>, n: usize| vec![0.0; 2 * n];
    let cfg = PegConfig {
        candidates: 128,
        horizon: 15,
        gamma: 0.99,
    };
    let trials = 50;
    let mut right_hits = 0;
    // starts within one PEG horizon of travel from the unexplored half
    let near: Vec<Vec<f64>> = buf
        .iter()
        .map(|t| t.s_next.clone())
        .filter(|s| s[0] >= -1.5)
        .collect();
    for _ in 0..trials {
        let starts = vec![near[rng.gen_range(0..near.len())].clone()];
        let choice = peg_goal(
            &ens,
            &mut go,
            &mut explore,
            None,
            &spec,
            &buf,
            &starts,
            &cfg,
            100.0,
            &mut rng,
        )
        .unwrap();
        if choice.goal.vec[0] > 0.0 {
            right_hits += 1;
        }
    }
    let frac = right_hits as f64 / trials as f64;
    let pass = ratio >= 2.0 && frac >= 0.7;
    report(
        4,
        "novelty ordering on left-half arena data",
        pass,
        &format!("disagreement right/left {ratio:.2} (>= 2), PEG right-half picks {right_hits}/{trials} (>= 70%)"),
    );
    assert!(pass);
}

fn within_3_sigma(count: u64, n: u64, p: f64) -> bool {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - n as f64 * p).abs() <= 3.0 * sd + 1e-9
}

#[test]
fn c05_goal_mixture_statistics() {
    let n = 100_000u64;
    let spec = EnvSpec::umaze();
    let buf = random_transitions(&spec, 200, 5);
    let alpha = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mix = ImaginationGoalMixture::new(alpha).unwrap();
    let mut src = [0u64; 3];
    for (_, s) in mix.sample(n as usize, &spec, &buf, &mut rng) {
        src[match s {
            GoalSource::Eval => 0,
            GoalSource::Initial => 1,
            GoalSource::Buffer => 2,
        }] += 1;
    }
    let src_ok = src
        .iter()
        .zip(mix.weights())
        .all(|(&c, w)| within_3_sigma(c, n, w));

    let mut col = Collector::new(GoExploreConfig::for_env(&spec, Variant::Morefree)).unwrap();
    let mut pol = RandomPolicies::for_env(&spec);
    let live = spec.start_state.clone();
    let mut task = 0u64;
    for _ in 0..n {
        if let CollectorEvent::Cycle {
            branch: Branch::Task,
            ..
        } = col.plan_cycle(&live, 0, &spec, &mut pol, &buf, u64::MAX, &mut rng)
        {
            task += 1;
        }
    }
    let branch_ok = within_3_sigma(task, n, alpha);
    let pass = src_ok && branch_ok;
    report(
        5,
        "goal mixture and branch frequencies at n = 1e5",
        pass,
        &format!(
            "sources {:?} vs weights {:?}; task branch {task} vs {}",
            src,
            mix.weights().map(|w| w * n as f64),
            alpha * n as f64
        ),
    );
    assert!(pass);
}

#[test]
fn c06_phase_contract() {
    let spec = EnvSpec::umaze();
    let cfg = GoExploreConfig::for_env(&spec, Variant::Morefree);
    let (hg, he) = (cfg.h_go, cfg.h_explore);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cur = EnvCursor::new(spec.clone(), &mut rng);
    let mut buf = ReplayBuffer::new(1_000_000, 4, 2);
    let mut col = Collector::new(cfg).unwrap();
    let mut pol = RandomPolicies::for_env(&spec);
    let mut cycles: Vec<(Branch, Vec<(Phase, usize)>)> = Vec::new();
    let mut problems = Vec::new();
    let mut prev_next: Option<Vec<f64>> = None;
    loop {
        let step = col
            .step(&mut cur, &mut pol, &mut buf, u64::MAX, &mut rng)
            .unwrap();
        if let Some(p) = &prev_next {
            if *p != step.transition.s {
                problems.push(format!(
                    "hand-off broken at step {}",
                    step.transition.global_step
                ));
            }
        }
        prev_next = Some(step.transition.s_next.clone());
        let mut done = false;
        for e in step.events {
            match e {
                CollectorEvent::Cycle { branch, .. } => {
                    if cycles.len() == 1000 {
                        done = true;
                    } else {
                        cycles.push((branch, Vec::new()));
                    }
                }
                CollectorEvent::Segment { phase, steps, .. } => {
                    cycles.last_mut().unwrap().1.push((phase, steps));
                }
            }
        }
        if done {
            break;
        }
    }
    for (i, (branch, segs)) in cycles.iter().enumerate() {
        let want: Vec<(Phase, usize)> = match branch {
            Branch::Task => vec![
                (Phase::GoTask, hg),
                (Phase::Explore, he),
                (Phase::GoBack, hg),
                (Phase::Explore, he),
            ],
            _ => vec![(Phase::GoExpl, hg), (Phase::Explore, he)],
        };
        if *segs != want {
            problems.push(format!("cycle {i}: {segs:?}"));
        }
    }
    // phase tags of stored rows follow the segment schedule
    let mut rows = buf.iter();
    'outer: for (_, segs) in &cycles {
        for &(phase, steps) in segs {
            for _ in 0..steps {
                match rows.next() {
                    Some(t) if t.phase == phase => {}
                    other => {
                        problems.push(format!(
                            "row tag {:?}, expected {phase:?}",
                            other.map(|t| t.phase)
                        ));
                        break 'outer;
                    }
                }
            }
        }
    }
    let pass = problems.is_empty() && cycles.len() == 1000;
    report(
        6,
        "phase contract over 1000 cycles",
        pass,
        &format!(
            "{} cycles, {} problems{}",
            cycles.len(),
            problems.len(),
            problems
                .first()
                .map_or(String::new(), |p| format!(", first: {p}"))
        ),
    );
    assert!(pass);
}

fn acceptance_config(env: &str, variant: Variant, seed: u64, steps: u64) -> ExperimentConfig {
    let text = format!(
        r#"
[run]
env = "{env}"
variant = "{variant}"
seed = {seed}
total_env_steps = {steps}
[model]
hidden = [64, 64]
[distance]
hidden = [64, 64]
[agent]
hidden = [64, 64]
"#
    );
    ExperimentConfig::from_toml_str(&text, &[]).unwrap()
}

/// Budget of the umaze reproduction run.
const UMAZE_STEPS: u64 = 150_000;
/// Budget of each object-arena ordering run.
const OBJECT_ARENA_STEPS: u64 = 60_000;

fn final_run(cfg: ExperimentConfig) -> morefree::harness::RunSummary {
    let mut t = Trainer::new(cfg).unwrap();
    t.run_to_end().unwrap();
    t.summary()
}

#[test]
#[ignore = "about 5 hours on one core"]
fn c07_umaze_reproduction() {
    let mut lines = Vec::new();
    let mut pass = true;
    for (variant, ok) in [
        (Variant::Morefree, (|s: f64| s >= 0.9) as fn(f64) -> bool),
        (Variant::ResetFreePeg, |s| s >= 0.9),
        (Variant::Random, |s| s <= 0.1),
    ] {
        let mut finals = Vec::new();
        for seed in 0..3 {
            let s = final_run(acceptance_config("umaze", variant, seed, UMAZE_STEPS));
            pass &= ok(s.final_success);
            finals.push(s.final_success);
        }
        lines.push(format!("{variant} {finals:?}"));
    }
    report(
        7,
        &format!("umaze final success within {UMAZE_STEPS} steps, 3 seeds"),
        pass,
        &format!(
            "{} (morefree and reset_free_peg >= 0.9, random <= 0.1)",
            lines.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "several hours on one core"]
fn c08_object_arena_ordering() {
    let variants = [
        Variant::Morefree,
        Variant::ResetFreePeg,
        Variant::NoBfge,
        Variant::NoImag,
        Variant::OnlyTaskGoals,
    ];
    let mut success = Vec::new();
    let mut relevant = Vec::new();
    for v in variants {
        let runs: Vec<_> = (0..5)
            .map(|seed| {
                final_run(acceptance_config(
                    "object-arena",
                    v,
                    seed,
                    OBJECT_ARENA_STEPS,
                ))
            })
            .collect();
        success.push(runs.iter().map(|r| r.final_success).sum::<f64>() / 5.0);
        relevant.push(runs.iter().map(|r| r.task_relevant_fraction).sum::<f64>() / 5.0);
    }
    let ordering = success[1..].iter().all(|&s| success[0] >= s);
    let ratio = relevant[0] / relevant[1];
    let pass = ordering && ratio >= 1.2;
    let table: Vec<String> = variants
        .iter()
        .zip(success.iter().zip(&relevant))
        .map(|(v, (s, r))| format!("{v} {s:.2}/{r:.3}"))
        .collect();
    report(
        8,
        "object-arena ordering, 5 seeds (mean success / task-relevant fraction)",
        pass,
        &format!(
            "{}; morefree/reset_free_peg relevant ratio {ratio:.2} (>= 1.2)",
            table.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn c09_determinism() {
    let metrics = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = acceptance_config("umaze", Variant::Morefree, 9, 4000);
        cfg.run.eval_every = 1000;
        cfg.model.hidden = vec![32, 32];
        cfg.distance.hidden = vec![32, 32];
        cfg.agent.hidden = vec![32, 32];
        cfg.output.dir = dir.path().to_path_buf();
        morefree::harness::train(cfg).unwrap();
        std::fs::read(dir.path().join("metrics.csv")).unwrap()
    };
    let (a, b) = (metrics(), metrics());
    let pass = a == b && !a.is_empty();
    report(
        9,
        "bit-identical metrics for identical config and seed",
        pass,
        &format!("{} bytes", a.len()),
    );
    assert!(pass);
}

#[test]
fn c10_eval_isolation_and_reset_schedule() {
    // No learning: isolates the loop's bookkeeping over a full 150k-step run.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = acceptance_config("object-arena", Variant::Random, 10, 150_000);
    cfg.run.eval_every = 5000;
    cfg.output.dir = dir.path().to_path_buf();
    cfg.output.dump_buffer = false;
    let mut t = Trainer::with_output(cfg).unwrap();
    let mut isolation_ok = true;
    let mut evals = 0;
    while !t.is_done() {
        t.step().unwrap();
        if t.env_steps().is_multiple_of(25_000) {
            let (len, state) = (t.buffer.len(), t.cursor.state.clone());
            t.evaluate();
            evals += 1;
            isolation_ok &= t.buffer.len() == len && t.cursor.state == state;
        }
    }
    let rows_ok = t.rows().iter().all(|r| r.buffer_size as u64 == r.env_step);
    let k = t.spec.hard_reset_interval.unwrap();
    let expected: Vec<u64> = (0..=150_000 / k).map(|i| i * k).collect();
    let resets_ok = t.cursor.resets() == expected.as_slice();
    let resets = t.cursor.resets().to_vec();
    let rows = t.rows().len();
    t.finish().unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let logged: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == "hard_reset")
        .map(|v| v["env_step"].as_u64().unwrap())
        .collect();
    let log_ok = logged == expected[1..];
    let pass = isolation_ok && rows_ok && resets_ok && log_ok;
    report(
        10,
        "evaluation isolation and hard-reset schedule over 150k steps",
        pass,
        &format!("{evals} extra evaluations, {rows} rows, resets {resets:?}, logged {logged:?}"),
    );
    assert!(pass);
}
