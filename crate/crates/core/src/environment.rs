//! Synthetic beneficiary cohorts.
//!
//! Each arm is drawn from a small structural causal model over six latent
//! scores in `[0, 1]`, projected onto the 34-slot bucket schema, and given a
//! two-state transition model whose active/passive gap depends on the buckets
//! through a fixed weight vector.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of slots in the one-hot feature vector.
pub const NUM_SLOTS: usize = 34;

/// Version tag written into serialized cohorts.
pub const COHORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EnvironmentError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("bucket index {index} out of range for {group} ({count} buckets)")]
    Encoding {
        group: FeatureGroup,
        index: usize,
        count: usize,
    },
    #[error("invalid transition config: {0}")]
    Config(String),
}

/// The six feature groups, in slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureGroup {
    #[serde(rename = "Age")]
    Age,
    #[serde(rename = "Language_Spoken")]
    LanguageSpoken,
    #[serde(rename = "Education_Level")]
    EducationLevel,
    #[serde(rename = "Phone_Ownership")]
    PhoneOwnership,
    #[serde(rename = "Times_To_Be_Called")]
    TimesToBeCalled,
    #[serde(rename = "Income")]
    Income,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 6] = [
        FeatureGroup::Age,
        FeatureGroup::LanguageSpoken,
        FeatureGroup::EducationLevel,
        FeatureGroup::PhoneOwnership,
        FeatureGroup::TimesToBeCalled,
        FeatureGroup::Income,
    ];

    /// Position of this group in [`FeatureGroup::ALL`].
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Age => "Age",
            FeatureGroup::LanguageSpoken => "Language_Spoken",
            FeatureGroup::EducationLevel => "Education_Level",
            FeatureGroup::PhoneOwnership => "Phone_Ownership",
            FeatureGroup::TimesToBeCalled => "Times_To_Be_Called",
            FeatureGroup::Income => "Income",
        }
    }

    pub fn from_name(name: &str) -> Option<FeatureGroup> {
        FeatureGroup::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Slot descriptions exactly as listed to the reward-writing model.
pub const SLOT_LABELS: [&str; NUM_SLOTS] = [
    "Ages 10-20",
    "Ages 21-30",
    "Ages 31-40",
    "Ages 41-50",
    "Ages 51-60",
    "Speaks Hindi",
    "Speaks Marathi",
    "Speaks Gujarati",
    "Speaks Kannada",
    "Speaks Tamil",
    "Education level 1/7 -- Illiterate",
    "Education level 2/7 -- 1-5th Grade Completed",
    "Education level 3/7 -- 6-9th Grade Completed",
    "Education level 4/7 -- 10th Grade Passed",
    "Education level 5/7 -- 12th Grade Passed",
    "Education level 6/7 -- Graduate",
    "Education level 7/7 -- Post Graduate",
    "Phone owner 0 (e.g., woman)",
    "Phone owner 1 (e.g., husband)",
    "Phone owner 2 (e.g., family)",
    "To be called from 8:30 am - 10:30 am",
    "To be called from 10:30 am - 12:30 pm",
    "To be called from 12:30 pm - 3:30 pm",
    "To be called from 3:30 pm - 5:30 pm",
    "To be called from 5:30 pm - 7:30 pm",
    "To be called from 7:30 pm - 9:30 pm",
    "Income bracket 1 (no income)",
    "Income bracket 2 (e.g., 1-5000)",
    "Income bracket 3 (e.g., 5001-10000)",
    "Income bracket 4 (e.g., 10001-15000)",
    "Income bracket 5 (e.g., 15001-20000)",
    "Income bracket 6 (e.g., 20001-25000)",
    "Income bracket 7 (e.g., 25001-30000)",
    "Income bracket 8 (e.g., 30000-999999)",
];

/// Bucket counts and contiguous slot ranges of the six groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSchema {
    counts: [usize; 6],
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::standard()
    }
}

impl FeatureSchema {
    pub const fn standard() -> Self {
        Self {
            counts: [5, 5, 7, 3, 6, 8],
        }
    }

    pub fn bucket_count(&self, group: FeatureGroup) -> usize {
        self.counts[group.ordinal()]
    }

    pub fn group_start(&self, group: FeatureGroup) -> usize {
        self.counts[..group.ordinal()].iter().sum()
    }

    pub fn slot_range(&self, group: FeatureGroup) -> Range<usize> {
        let start = self.group_start(group);
        start..start + self.bucket_count(group)
    }

    pub fn total_slots(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Group owning `slot`, or `None` past the last slot.
    pub fn group_of_slot(&self, slot: usize) -> Option<FeatureGroup> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| self.slot_range(*g).contains(&slot))
    }

    /// Equal-width bucketing of a latent score; the top edge folds into the
    /// last bucket.
    pub fn bucket_of(&self, group: FeatureGroup, value: f64) -> usize {
        let n = self.bucket_count(group);
        ((value * n as f64).floor().max(0.0) as usize).min(n - 1)
    }

    /// Bucket position rescaled to `[0, 1]`.
    pub fn normalized_position(&self, group: FeatureGroup, bucket: usize) -> f64 {
        bucket as f64 / (self.bucket_count(group) - 1) as f64
    }
}

/// Latent scores of one beneficiary, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousProfile {
    pub age: f64,
    pub education: f64,
    pub language: f64,
    pub income: f64,
    pub phone_ownership: f64,
    pub times_to_be_called: f64,
}

impl ContinuousProfile {
    pub fn value(&self, group: FeatureGroup) -> f64 {
        match group {
            FeatureGroup::Age => self.age,
            FeatureGroup::LanguageSpoken => self.language,
            FeatureGroup::EducationLevel => self.education,
            FeatureGroup::PhoneOwnership => self.phone_ownership,
            FeatureGroup::TimesToBeCalled => self.times_to_be_called,
            FeatureGroup::Income => self.income,
        }
    }
}

/// One bucket index per feature group, in [`FeatureGroup::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Buckets(pub [usize; 6]);

impl Buckets {
    pub fn get(&self, group: FeatureGroup) -> usize {
        self.0[group.ordinal()]
    }

    pub fn set(&mut self, group: FeatureGroup, bucket: usize) {
        self.0[group.ordinal()] = bucket;
    }
}

/// Per-group logit weights driving the active/passive gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightVector {
    pub age: f64,
    pub income: f64,
    pub language_spoken: f64,
    pub education_level: f64,
    pub phone_ownership: f64,
    pub times_to_be_called: f64,
}

impl Default for WeightVector {
    fn default() -> Self {
        Self {
            age: 0.8,
            income: 1.5,
            language_spoken: -0.3,
            education_level: 1.5,
            phone_ownership: -1.5,
            times_to_be_called: 0.3,
        }
    }
}

impl WeightVector {
    pub fn weight(&self, group: FeatureGroup) -> f64 {
        match group {
            FeatureGroup::Age => self.age,
            FeatureGroup::LanguageSpoken => self.language_spoken,
            FeatureGroup::EducationLevel => self.education_level,
            FeatureGroup::PhoneOwnership => self.phone_ownership,
            FeatureGroup::TimesToBeCalled => self.times_to_be_called,
            FeatureGroup::Income => self.income,
        }
    }
}

/// Probability of landing in the engaged state (1) for each `(state, action)`.
///
/// `p_good[s][a]`; action 1 is the active (call) action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub p_good: [[f64; 2]; 2],
    pub delta: f64,
}

impl TransitionModel {
    /// Active rows are the passive rows shifted up by `delta`, everything
    /// clamped to `[epsilon, 1 - epsilon]`.
    pub fn from_passive(passive_bad: f64, passive_good: f64, delta: f64, epsilon: f64) -> Self {
        let clamp = |p: f64| p.clamp(epsilon, 1.0 - epsilon);
        let p00 = clamp(passive_bad);
        let p10 = clamp(passive_good);
        Self {
            p_good: [
                [p00, clamp((p00 + delta).min(1.0 - epsilon))],
                [p10, clamp((p10 + delta).min(1.0 - epsilon))],
            ],
            delta,
        }
    }

    pub fn p_good(&self, state: usize, action: usize) -> f64 {
        self.p_good[state][action]
    }

    /// Identical active and passive rows.
    pub fn symmetric(passive_bad: f64, passive_good: f64) -> Self {
        Self {
            p_good: [[passive_bad, passive_bad], [passive_good, passive_good]],
            delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionConfig {
    pub delta_max: f64,
    pub epsilon: f64,
    pub passive_bad_range: (f64, f64),
    pub passive_good_range: (f64, f64),
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            delta_max: 0.3,
            epsilon: 0.05,
            passive_bad_range: (0.05, 0.35),
            passive_good_range: (0.45, 0.90),
        }
    }
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<(), EnvironmentError> {
        let err = |m: String| Err(EnvironmentError::Config(m));
        if !(0.0..1.0).contains(&self.delta_max) {
            return err(format!("delta_max {} not in [0, 1)", self.delta_max));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return err(format!("epsilon {} not in [0, 0.5)", self.epsilon));
        }
        for (name, (lo, hi)) in [
            ("passive_bad_range", self.passive_bad_range),
            ("passive_good_range", self.passive_good_range),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return err(format!("{name} ({lo}, {hi}) is not an interval inside [0, 1]"));
            }
        }
        if self.passive_good_range.1 < self.passive_bad_range.0 {
            return err("passive_good_range lies entirely below passive_bad_range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub weights: WeightVector,
    pub transitions: TransitionConfig,
}

/// One beneficiary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmProfile {
    pub arm_id: usize,
    pub continuous: ContinuousProfile,
    pub buckets: Buckets,
    pub feature_vector: Vec<u8>,
    pub transitions: TransitionModel,
}

impl ArmProfile {
    pub fn features(&self) -> [f64; NUM_SLOTS] {
        let mut out = [0.0; NUM_SLOTS];
        for (o, v) in out.iter_mut().zip(&self.feature_vector) {
            *o = f64::from(*v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema_version: u32,
    pub alpha: f64,
    pub seed: u64,
    pub arms: Vec<ArmProfile>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    /// Distinct feature vectors in first-seen order, at most `cap` of them.
    pub fn distinct_features(&self, cap: usize) -> Vec<[f64; NUM_SLOTS]> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for arm in &self.arms {
            if out.len() >= cap {
                break;
            }
            if seen.insert(arm.feature_vector.clone()) {
                out.push(arm.features());
            }
        }
        out
    }
}

fn unif<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Draws latent scores in topological order. Noise terms are drawn even when
/// `alpha == 1` so the random stream does not depend on `alpha`.
pub fn sample_continuous_profile<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: f64,
) -> Result<ContinuousProfile, EnvironmentError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EnvironmentError::InvalidParameter {
            name: "alpha",
            reason: format!("{alpha} not in [0, 1]"),
        });
    }
    let age = unif(rng);
    let education = unif(rng);
    let language = unif(rng);
    Ok(structural_equations(
        alpha,
        age,
        education,
        language,
        [unif(rng), unif(rng), unif(rng)],
    ))
}

/// Income, phone ownership and call time from their continuous parents and
/// one uniform noise draw each.
pub fn structural_equations(
    alpha: f64,
    age: f64,
    education: f64,
    language: f64,
    noise: [f64; 3],
) -> ContinuousProfile {
    let clip = |x: f64| x.clamp(0.0, 1.0);
    let income = clip(alpha * (age + education) / 2.0 + (1.0 - alpha) * noise[0]);
    let phone_ownership = clip(alpha * (1.0 - income) + (1.0 - alpha) * noise[1]);
    let times_to_be_called = clip(alpha * phone_ownership + (1.0 - alpha) * noise[2]);
    ContinuousProfile {
        age,
        education,
        language,
        income,
        phone_ownership,
        times_to_be_called,
    }
}

pub fn bucketize(profile: &ContinuousProfile, schema: &FeatureSchema) -> Buckets {
    let mut b = Buckets([0; 6]);
    for g in FeatureGroup::ALL {
        b.set(g, schema.bucket_of(g, profile.value(g)));
    }
    b
}

pub fn encode_features(buckets: &Buckets, schema: &FeatureSchema) -> Result<Vec<u8>, EnvironmentError> {
    let mut v = vec![0u8; schema.total_slots()];
    for g in FeatureGroup::ALL {
        let index = buckets.get(g);
        let count = schema.bucket_count(g);
        if index >= count {
            return Err(EnvironmentError::Encoding {
                group: g,
                index,
                count,
            });
        }
        v[schema.group_start(g) + index] = 1;
    }
    Ok(v)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `delta_max * sigmoid(sum_j w_j * (v_j - 0.5))` with `v_j` the normalized
/// bucket position.
pub fn compute_delta(buckets: &Buckets, weights: &WeightVector, schema: &FeatureSchema, delta_max: f64) -> f64 {
    let logit: f64 = FeatureGroup::ALL
        .iter()
        .map(|&g| weights.weight(g) * (schema.normalized_position(g, buckets.get(g)) - 0.5))
        .sum();
    delta_max * sigmoid(logit)
}

const MAX_REDRAWS: usize = 10_000;

pub fn build_transition_model<R: Rng + ?Sized>(
    buckets: &Buckets,
    weights: &WeightVector,
    schema: &FeatureSchema,
    rng: &mut R,
    config: &TransitionConfig,
) -> Result<TransitionModel, EnvironmentError> {
    config.validate()?;
    let delta = compute_delta(buckets, weights, schema, config.delta_max);
    let draw = |rng: &mut R, (lo, hi): (f64, f64)| lo + (hi - lo) * unif(rng);
    let clamp = |p: f64| p.clamp(config.epsilon, 1.0 - config.epsilon);
    let bad = draw(rng, config.passive_bad_range);
    for _ in 0..MAX_REDRAWS {
        let good = draw(rng, config.passive_good_range);
        if clamp(good) >= clamp(bad) {
            return Ok(TransitionModel::from_passive(bad, good, delta, config.epsilon));
        }
    }
    Err(EnvironmentError::Config(format!(
        "no passive good-state probability >= {bad:.4} after {MAX_REDRAWS} redraws"
    )))
}

pub fn generate_cohort(n: usize, alpha: f64, seed: u64, config: &CohortConfig) -> Result<Cohort, EnvironmentError> {
    if n == 0 {
        return Err(EnvironmentError::InvalidParameter {
            name: "n",
            reason: "cohort must contain at least one arm".into(),
        });
    }
    config.transitions.validate()?;
    let schema = FeatureSchema::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arms = Vec::with_capacity(n);
    for arm_id in 0..n {
        let continuous = sample_continuous_profile(&mut rng, alpha)?;
        let buckets = bucketize(&continuous, &schema);
        let feature_vector = encode_features(&buckets, &schema)?;
        let transitions = build_transition_model(&buckets, &config.weights, &schema, &mut rng, &config.transitions)?;
        arms.push(ArmProfile {
            arm_id,
            continuous,
            buckets,
            feature_vector,
            transitions,
        });
    }
    Ok(Cohort {
        schema_version: COHORT_SCHEMA_VERSION,
        alpha,
        seed,
        arms,
    })
}
