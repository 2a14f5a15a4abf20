use morefree::agents::{GoalSource, ImaginationGoalMixture};
use morefree::approx::lambda_returns;
use morefree::buffer::{Phase, ReplayBuffer, Transition};
use morefree::envs::EnvSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd + 1e-9
}

fn filled_buffer() -> ReplayBuffer {
    let mut b = ReplayBuffer::new(100, 4, 2);
    for i in 0..50 {
        b.insert(Transition {
            s: vec![0.0; 4],
            a: vec![0.0; 2],
            s_next: vec![2.0, 0.3, 0.0, 0.0],
            global_step: i,
            traj_id: 0,
            phase: Phase::Explore,
        })
        .unwrap();
    }
    b
}

#[test]
fn mixture_frequencies_match_weights() {
    let spec = EnvSpec::umaze();
    let buffer = filled_buffer();
    for alpha in [0.0, 0.2, 0.5, 1.0] {
        let mix = ImaginationGoalMixture::new(alpha).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for (g, src) in mix.sample(n, &spec, &buffer, &mut rng) {
            counts[src as usize] += 1;
            match src {
                GoalSource::Eval => assert_eq!(g.vec, vec![0.5, 2.5]),
                GoalSource::Buffer => assert_eq!(g.vec, vec![2.0, 0.3]),
                GoalSource::Initial => {
                    assert!((g.vec[0] - 0.5).abs() <= 0.1 && (g.vec[1] - 0.5).abs() <= 0.1)
                }
            }
        }
        for (c, w) in counts.iter().zip(mix.weights()) {
            assert!(within_3_sigma(*c, n, w), "alpha {alpha}: {counts:?}");
        }
    }
}

#[test]
fn invalid_alpha_is_rejected() {
    assert!(ImaginationGoalMixture::new(-0.1).is_err());
    assert!(ImaginationGoalMixture::new(1.5).is_err());
}

proptest! {
    #[test]
    fn constant_reward_and_value_fixed_point(c in -2.0f64..2.0, gamma in 0.0f64..0.999, lambda in 0.0f64..1.0, h in 1usize..30) {
        // V = c / (1 - gamma) is the fixed point for constant reward c
        let v = c / (1.0 - gamma);
        let r = vec![c; h];
        let values = vec![v; h + 1];
        for ret in lambda_returns(&r, &values, gamma, lambda).unwrap() {
            prop_assert!((ret - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn lambda_one_is_discounted_monte_carlo(rs in proptest::collection::vec(-1.0f64..1.0, 1..20), tail in -5.0f64..5.0, gamma in 0.5f64..1.0) {
        let h = rs.len();
        let mut values = vec![0.0; h];
        values.push(tail);
        let ret = lambda_returns(&rs, &values, gamma, 1.0).unwrap();
        let mut want = tail;
        for t in (0..h).rev() {
            want = rs[t] + gamma * want;
            prop_assert!((ret[t] - want).abs() < 1e-9);
        }
    }
}
