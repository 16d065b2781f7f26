use std::collections::{BTreeMap, BTreeSet};

use rmablab_core::environment::{generate_cohort, CohortConfig, FeatureGroup, FeatureSchema};
use rmablab_core::fairness::{allocation_rates, dp_variance, is_acceptable_features, unfairness_counts};
use rmablab_core::search::GoalPrompt;
use rmablab_core::whittle::{simulate_policy, simulate_uniform, SimConfig};
use rmablab_core::reward_dsl::parse;

fn goal(intended: &[(FeatureGroup, &[usize])]) -> GoalPrompt {
    let intended_buckets: BTreeMap<_, BTreeSet<usize>> =
        intended.iter().map(|(g, b)| (*g, b.iter().copied().collect())).collect();
    GoalPrompt {
        prompt_id: 0,
        language_label: "test".into(),
        text: "test".into(),
        intended_features: intended_buckets.keys().copied().collect(),
        intended_buckets,
    }
}

#[test]
fn hand_computed_dp_variance() {
    assert!((dp_variance(&[0.2, 0.4]) - 0.01).abs() < 1e-15);
    assert!((dp_variance(&[1.0, 0.0, 0.0, 0.0, 0.0]) - 0.16).abs() < 1e-15);
    assert_eq!(dp_variance(&[0.3; 7]), 0.0);
}

#[test]
fn dp_variance_ignores_bucket_order() {
    let rates = [0.1, 0.5, 0.25, 0.0, 0.9, 0.3];
    let mut rev = rates;
    rev.reverse();
    let mut rot = rates;
    rot.rotate_left(2);
    assert!((dp_variance(&rates) - dp_variance(&rev)).abs() < 1e-15);
    assert!((dp_variance(&rates) - dp_variance(&rot)).abs() < 1e-15);
}

#[test]
fn acceptability_requires_exact_match_for_every_subset() {
    let intended = goal(&[(FeatureGroup::Age, &[0, 1]), (FeatureGroup::Income, &[0])]);
    for mask in 0u32..64 {
        let referenced: BTreeSet<_> =
            FeatureGroup::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, g)| *g).collect();
        let expected = referenced == intended.intended_features;
        assert_eq!(is_acceptable_features(&referenced, &intended), expected, "{referenced:?}");
    }
}

#[test]
fn rates_match_brute_force_recount_of_action_log() {
    let cohort = generate_cohort(100, 0.8, 3, &CohortConfig::default()).unwrap();
    let reward = parse("state * (1 + 3 * agent_feats[0] + agent_feats[27])").unwrap();
    let cfg = SimConfig::default();
    let res = simulate_policy(&cohort, &reward, &cfg, 4).unwrap();
    let schema = FeatureSchema::standard();
    let rates = allocation_rates(&res, &cohort, &schema);
    let mut total = 0u64;
    let mut acted: BTreeMap<(FeatureGroup, usize), u64> = BTreeMap::new();
    for arm_id in res.action_log.iter().flatten().flatten() {
        total += 1;
        for g in FeatureGroup::ALL {
            *acted.entry((g, cohort.arms[*arm_id].buckets.get(g))).or_default() += 1;
        }
    }
    assert_eq!(total, (cfg.budget * cfg.horizon * cfg.episodes) as u64);
    for fr in &rates.features {
        for b in &fr.buckets {
            let n = acted.get(&(fr.group, b.bucket)).copied().unwrap_or(0);
            let members = cohort.arms.iter().filter(|a| a.buckets.get(fr.group) == b.bucket).count();
            assert_eq!(b.actions, n);
            assert_eq!(b.arms, members);
            assert!((b.share - n as f64 / total as f64).abs() < 1e-15);
            if members > 0 {
                let expected = n as f64 / (members * cfg.horizon * cfg.episodes) as f64;
                assert!((b.rate - expected).abs() < 1e-15);
            }
        }
        assert!((fr.shares().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_policy_is_near_parity() {
    let cohort = generate_cohort(100, 0.2, 21, &CohortConfig::default()).unwrap();
    let cfg = SimConfig {
        horizon: 100,
        episodes: 100,
        ..SimConfig::default()
    };
    let res = simulate_uniform(&cohort, &cfg, 5).unwrap();
    let rates = allocation_rates(&res, &cohort, &FeatureSchema::standard());
    for fr in &rates.features {
        // An empty bucket would sit at rate 0 and swamp the bound.
        assert!(fr.buckets.iter().all(|b| !b.empty), "{:?}", fr.group);
        let v = dp_variance(&fr.rates());
        assert!(v < 1e-3, "{:?}: {v}", fr.group);
    }
}

#[test]
fn unfairness_counts_threshold_and_relative_flag() {
    let g = goal(&[(FeatureGroup::Age, &[0])]);
    let dp: BTreeMap<_, _> = [
        (FeatureGroup::Age, 0.004),
        (FeatureGroup::LanguageSpoken, 0.0001),
        (FeatureGroup::EducationLevel, 0.0015),
        (FeatureGroup::PhoneOwnership, 0.006),
        (FeatureGroup::TimesToBeCalled, 0.0),
        (FeatureGroup::Income, 0.0008),
    ]
    .into_iter()
    .collect();
    let counts = unfairness_counts(&dp, &g, &[0.0005, 0.001, 0.002, 0.005, 0.01]);
    assert_eq!(counts.absolute.iter().map(|(_, c)| *c).collect::<Vec<_>>(), vec![3, 2, 1, 1, 0]);
    assert!(counts.relative);
    let mut calmer = dp.clone();
    calmer.insert(FeatureGroup::PhoneOwnership, 0.003);
    assert!(!unfairness_counts(&calmer, &g, &[]).relative);
}
