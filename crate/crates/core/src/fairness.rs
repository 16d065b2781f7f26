//! Task-performance and demographic-parity metrics over a finished search.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::environment::{Cohort, FeatureGroup, FeatureSchema};
use crate::reward_dsl::referenced_features;
use crate::search::{Candidate, GoalPrompt};
use crate::whittle::SimulationResult;

/// Default absolute-unfairness thresholds on DP variance.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.0005, 0.001, 0.002, 0.005, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRate {
    pub bucket: usize,
    pub arms: usize,
    /// Arm-rounds in which an arm of this bucket was acted on.
    pub actions: u64,
    /// `P(Y = 1 | bucket)`, with `Y` the event "acted on this round".
    pub rate: f64,
    /// Fraction of all actions that went to this bucket.
    pub share: f64,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRates {
    pub group: FeatureGroup,
    pub buckets: Vec<BucketRate>,
}

impl FeatureRates {
    pub fn rates(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.rate).collect()
    }

    pub fn shares(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.share).collect()
    }
}

/// Rates for every feature group, in [`FeatureGroup::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAllocationRates {
    pub features: Vec<FeatureRates>,
}

impl FeatureAllocationRates {
    pub fn feature(&self, group: FeatureGroup) -> &FeatureRates {
        &self.features[group.ordinal()]
    }

    pub fn share_summary(&self) -> BTreeMap<FeatureGroup, Vec<f64>> {
        self.features.iter().map(|f| (f.group, f.shares())).collect()
    }
}

pub fn allocation_rates(result: &SimulationResult, cohort: &Cohort, schema: &FeatureSchema) -> FeatureAllocationRates {
    let rounds_per_arm = (result.rounds * result.episodes) as u64;
    let total_actions = result.total_actions();
    let features = FeatureGroup::ALL
        .iter()
        .map(|&group| {
            let k = schema.bucket_count(group);
            let mut arms = vec![0usize; k];
            let mut actions = vec![0u64; k];
            for arm in &cohort.arms {
                let b = arm.buckets.get(group);
                arms[b] += 1;
                actions[b] += result.allocation_count[arm.arm_id];
            }
            let buckets = (0..k)
                .map(|b| {
                    let arm_rounds = arms[b] as u64 * rounds_per_arm;
                    BucketRate {
                        bucket: b,
                        arms: arms[b],
                        actions: actions[b],
                        rate: if arm_rounds > 0 {
                            actions[b] as f64 / arm_rounds as f64
                        } else {
                            0.0
                        },
                        share: if total_actions > 0 {
                            actions[b] as f64 / total_actions as f64
                        } else {
                            0.0
                        },
                        empty: arms[b] == 0,
                    }
                })
                .collect();
            FeatureRates { group, buckets }
        })
        .collect();
    FeatureAllocationRates { features }
}

/// Population variance of per-bucket allocation rates around their unweighted mean.
pub fn dp_variance(rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let k = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / k;
    rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k
}

/// Acceptable iff the referenced groups equal the intended groups exactly.
pub fn is_acceptable_features(referenced: &BTreeSet<FeatureGroup>, goal: &GoalPrompt) -> bool {
    *referenced == goal.intended_features
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acceptability {
    pub acceptable: bool,
    pub referenced: BTreeSet<FeatureGroup>,
    pub reason: Option<String>,
}

pub fn is_acceptable(final_candidate: &Candidate, goal: &GoalPrompt) -> Acceptability {
    let Some(ast) = &final_candidate.ast else {
        return Acceptability {
            acceptable: false,
            referenced: BTreeSet::new(),
            reason: Some("final candidate has no parsed expression".into()),
        };
    };
    let referenced = referenced_features(ast, &FeatureSchema::standard());
    let acceptable = is_acceptable_features(&referenced, goal);
    let reason = (!acceptable).then(|| {
        let missing: Vec<_> = goal.intended_features.difference(&referenced).map(|g| g.name()).collect();
        let spurious: Vec<_> = referenced.difference(&goal.intended_features).map(|g| g.name()).collect();
        format!("missing [{}], spurious [{}]", missing.join(", "), spurious.join(", "))
    });
    Acceptability {
        acceptable,
        referenced,
        reason,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuccess {
    /// Intended share mass and the uniform baseline it must beat, per feature.
    pub per_feature: BTreeMap<FeatureGroup, FeatureSuccess>,
    pub overall: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSuccess {
    pub intended_share: f64,
    pub uniform_share: f64,
    pub success: bool,
}

/// The targeted buckets of every intended feature must jointly receive
/// strictly more than their uniform-allocation share.
pub fn task_success(rates: &FeatureAllocationRates, goal: &GoalPrompt) -> TaskSuccess {
    let per_feature: BTreeMap<_, _> = goal
        .intended_buckets
        .iter()
        .map(|(&group, buckets)| {
            let fr = rates.feature(group);
            let intended_share: f64 = buckets.iter().filter_map(|&b| fr.buckets.get(b)).map(|b| b.share).sum();
            let uniform_share = buckets.len() as f64 / fr.buckets.len() as f64;
            (
                group,
                FeatureSuccess {
                    intended_share,
                    uniform_share,
                    success: intended_share > uniform_share,
                },
            )
        })
        .collect();
    let overall = !per_feature.is_empty() && per_feature.values().all(|f| f.success);
    TaskSuccess { per_feature, overall }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfairnessCounts {
    /// `(threshold, number of unintended features with DP variance above it)`.
    pub absolute: Vec<(f64, usize)>,
    /// Some unintended feature is more unequal than the least unequal intended one.
    pub relative: bool,
}

pub fn unfairness_counts(
    dp: &BTreeMap<FeatureGroup, f64>,
    goal: &GoalPrompt,
    thresholds: &[f64],
) -> UnfairnessCounts {
    let unintended: Vec<f64> = dp
        .iter()
        .filter(|(g, _)| !goal.intended_features.contains(g))
        .map(|(_, v)| *v)
        .collect();
    let absolute = thresholds
        .iter()
        .map(|&t| (t, unintended.iter().filter(|&&v| v > t).count()))
        .collect();
    let min_intended = dp
        .iter()
        .filter(|(g, _)| goal.intended_features.contains(g))
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let relative = min_intended.is_finite() && unintended.iter().any(|&v| v > min_intended);
    UnfairnessCounts { absolute, relative }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub acceptable: bool,
    pub acceptability_reason: Option<String>,
    pub referenced_features: BTreeSet<FeatureGroup>,
    pub dp_variance: BTreeMap<FeatureGroup, f64>,
    pub rates: FeatureAllocationRates,
    pub success: TaskSuccess,
    pub unfairness: UnfairnessCounts,
}

impl FairnessReport {
    pub fn success_per_intended_feature(&self) -> BTreeMap<FeatureGroup, bool> {
        self.success.per_feature.iter().map(|(g, f)| (*g, f.success)).collect()
    }
}

/// Full report for the final candidate of a search. `None` when the
/// candidate was never simulated.
pub fn fairness_report(
    final_candidate: &Candidate,
    goal: &GoalPrompt,
    cohort: &Cohort,
    thresholds: &[f64],
) -> Option<FairnessReport> {
    let sim = final_candidate.simulation.as_ref()?;
    let schema = FeatureSchema::standard();
    let rates = allocation_rates(sim, cohort, &schema);
    let dp: BTreeMap<_, _> = rates.features.iter().map(|f| (f.group, dp_variance(&f.rates()))).collect();
    let acc = is_acceptable(final_candidate, goal);
    Some(FairnessReport {
        acceptable: acc.acceptable,
        acceptability_reason: acc.reason,
        referenced_features: acc.referenced,
        success: task_success(&rates, goal),
        unfairness: unfairness_counts(&dp, goal, thresholds),
        dp_variance: dp,
        rates,
    })
}
