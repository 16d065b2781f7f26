use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmablab_core::environment::{generate_cohort, CohortConfig, TransitionModel};
use rmablab_core::reward_dsl::parse;
use rmablab_core::whittle::{
    expected_next_reward, simulate_policy, simulate_uniform, subsidized_value, top_budget, whittle_index, ArmMdp,
    SimConfig, ACTIVE, PASSIVE,
};

fn random_mdp(rng: &mut ChaCha8Rng, delta: f64, beta: f64) -> ArmMdp {
    let bad: f64 = rng.random_range(0.05..0.35);
    let good = rng.random_range(bad.max(0.45)..0.9);
    ArmMdp {
        transitions: TransitionModel::from_passive(bad, good, delta, 0.05),
        reward: [0.0, 1.0],
        beta,
    }
}

#[test]
fn no_effect_arm_has_zero_index() {
    for (bad, good) in [(0.1, 0.6), (0.3, 0.9), (0.5, 0.5)] {
        let mdp = ArmMdp {
            transitions: TransitionModel::symmetric(bad, good),
            reward: [0.0, 1.0],
            beta: 0.9,
        };
        for s in 0..2 {
            let w = whittle_index(&mdp, s, 1e-9, 1e-10).unwrap();
            assert!(w.value.abs() <= 1e-6, "{bad},{good} s={s}: {}", w.value);
        }
    }
}

#[test]
fn myopic_index_is_immediate_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let delta = rng.random_range(0.0..0.3);
        let mut mdp = random_mdp(&mut rng, delta, 0.0);
        mdp.reward = [rng.random_range(0.0..1.0), rng.random_range(1.0..3.0)];
        for s in 0..2 {
            let w = whittle_index(&mdp, s, 1e-9, 1e-10).unwrap();
            let closed = expected_next_reward(&mdp, s, ACTIVE) - expected_next_reward(&mdp, s, PASSIVE);
            assert!((w.value - closed).abs() <= 1e-6);
        }
    }
}

fn sweep(bad: f64, good: f64, state: usize) -> Vec<f64> {
    (1..=6)
        .map(|k| {
            let mdp = ArmMdp {
                transitions: TransitionModel::from_passive(bad, good, 0.05 * k as f64, 0.05),
                reward: [0.0, 1.0],
                beta: 0.9,
            };
            whittle_index(&mdp, state, 1e-8, 1e-10).unwrap().value
        })
        .collect()
}

#[test]
fn bad_state_index_grows_with_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let bad: f64 = rng.random_range(0.05..0.35);
        let good: f64 = rng.random_range(0.45..0.9);
        let w = sweep(bad, good, 0);
        assert!(w.windows(2).all(|p| p[1] >= p[0] - 1e-6), "{bad} {good}: {w:?}");
    }
}

#[test]
fn good_state_index_grows_with_delta_below_the_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let bad: f64 = rng.random_range(0.05..0.35);
        // good + 0.3 stays under the 0.95 ceiling
        let good: f64 = rng.random_range(0.45..0.65);
        let w = sweep(bad, good, 1);
        assert!(w.windows(2).all(|p| p[1] >= p[0] - 1e-6), "{bad} {good}: {w:?}");
    }
}

#[test]
fn good_state_index_falls_once_active_probability_saturates() {
    // Checked against a separate value-iteration script: 0.1762, 0.1601, 0.1468
    // for delta 0.1, 0.15, 0.2.
    let w = sweep(0.237, 0.871, 1);
    for (got, want) in w[1..4].iter().zip([0.1762, 0.1601, 0.1468]) {
        assert!((got - want).abs() < 1e-3, "{w:?}");
    }
    assert!(w[2] < w[1]);
}

#[test]
fn index_scales_with_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let mdp = random_mdp(&mut rng, 0.15, 0.9);
        for s in 0..2 {
            let w = whittle_index(&mdp, s, 1e-8, 1e-10).unwrap().value;
            let scaled = ArmMdp { reward: [0.0, 5.0], ..mdp };
            let ws = whittle_index(&scaled, s, 1e-8, 1e-10).unwrap().value;
            assert!((ws - 5.0 * w).abs() < 1e-5, "{ws} vs 5*{w}");
        }
    }
}

#[test]
fn subsidy_above_index_makes_passive_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mdp = random_mdp(&mut rng, 0.2, 0.9);
        for s in 0..2 {
            let w = whittle_index(&mdp, s, 1e-8, 1e-10).unwrap().value;
            assert_eq!(subsidized_value(&mdp, w + 1e-3, 1e-10).unwrap().actions[s], PASSIVE);
            assert_eq!(subsidized_value(&mdp, w - 1e-3, 1e-10).unwrap().actions[s], ACTIVE);
        }
    }
}

#[test]
fn top_budget_breaks_ties_by_arm_id() {
    assert_eq!(top_budget(&[1.0, 3.0, 3.0, 2.0, 3.0], 2), vec![1, 2]);
    assert_eq!(top_budget(&[0.0; 4], 3), vec![0, 1, 2]);
    assert_eq!(top_budget(&[1.0, 2.0], 5), vec![0, 1]);
}

#[test]
fn whittle_beats_random_on_paired_seeds() {
    let reward = parse("state").unwrap();
    let cfg = SimConfig::default();
    let mut wins = 0;
    for seed in 0..20u64 {
        let cohort = generate_cohort(100, 0.2, 1000 + seed, &CohortConfig::default()).unwrap();
        let w = simulate_policy(&cohort, &reward, &cfg, seed).unwrap();
        let u = simulate_uniform(&cohort, &cfg, seed).unwrap();
        if w.total_engagement >= u.total_engagement {
            wins += 1;
        }
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn uniform_policy_allocates_budget_over_n() {
    let cohort = generate_cohort(100, 0.2, 1, &CohortConfig::default()).unwrap();
    let cfg = SimConfig::default();
    let res = simulate_uniform(&cohort, &cfg, 2).unwrap();
    let rate = res.total_actions() as f64 / (100 * cfg.horizon * cfg.episodes) as f64;
    assert!((rate - 0.2).abs() <= 0.02);
    for round in res.action_log.iter().flatten() {
        assert_eq!(round.len(), cfg.budget);
        assert!(round.windows(2).all(|w| w[0] < w[1]));
    }
    let per_arm: u64 = res.allocation_count.iter().sum();
    assert_eq!(per_arm, res.total_actions());
}

#[test]
fn simulation_is_reproducible() {
    let cohort = generate_cohort(50, 0.8, 1, &CohortConfig::default()).unwrap();
    let reward = parse("state * (1 + agent_feats[0])").unwrap();
    let cfg = SimConfig::default();
    let a = simulate_policy(&cohort, &reward, &cfg, 9).unwrap();
    let b = simulate_policy(&cohort, &reward, &cfg, 9).unwrap();
    assert_eq!(a, b);
}
