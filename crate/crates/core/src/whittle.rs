//! Whittle indices for two-state arms and the top-budget allocation policy.
//!
//! The index of a state is the passive subsidy at which the subsidized
//! single-arm MDP becomes indifferent between acting and not acting. It is
//! located by bisection over the subsidy, solving the subsidized MDP by value
//! iteration at every probe.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{ArmProfile, Cohort, FeatureGroup, TransitionModel};
use crate::reward_dsl::{EvalError, RewardAst};

pub const PASSIVE: usize = 0;
pub const ACTIVE: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("value iteration did not converge in {iterations} iterations (last sup-norm change {last_change:e}, lambda {lambda})")]
    NoConvergence {
        iterations: usize,
        last_change: f64,
        lambda: f64,
    },
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("reward evaluation failed for arm {arm_id} in state {state}: {source}")]
    RewardEval {
        arm_id: usize,
        state: usize,
        source: EvalError,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
}

/// A single arm with its reward on each resultant state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmMdp {
    pub transitions: TransitionModel,
    /// `reward[s']` is the reward for landing in state `s'`.
    pub reward: [f64; 2],
    pub beta: f64,
}

pub fn expected_next_reward(mdp: &ArmMdp, state: usize, action: usize) -> f64 {
    let p = mdp.transitions.p_good(state, action);
    p * mdp.reward[1] + (1.0 - p) * mdp.reward[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsidizedSolution {
    pub values: [f64; 2],
    /// Greedy action per state; ties go to the passive action.
    pub actions: [usize; 2],
    pub iterations: usize,
}

pub const MAX_VALUE_ITERATIONS: usize = 100_000;

fn q_values(mdp: &ArmMdp, lambda: f64, values: &[f64; 2], s: usize) -> [f64; 2] {
    let mut q = [0.0; 2];
    for a in [PASSIVE, ACTIVE] {
        let p = mdp.transitions.p_good(s, a);
        let cont = p * values[1] + (1.0 - p) * values[0];
        let subsidy = if a == PASSIVE { lambda } else { 0.0 };
        q[a] = subsidy + expected_next_reward(mdp, s, a) + mdp.beta * cont;
    }
    q
}

/// Value iteration on the arm where the passive action also earns `lambda`.
///
/// Stops once the sup-norm change drops below `tol * (1 - beta)`.
pub fn subsidized_value(mdp: &ArmMdp, lambda: f64, tol: f64) -> Result<SubsidizedSolution, SolverError> {
    if !(0.0..1.0).contains(&mdp.beta) {
        return Err(SolverError::InvalidParameter(format!("beta {} not in [0, 1)", mdp.beta)));
    }
    if !(tol > 0.0) {
        return Err(SolverError::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let threshold = tol * (1.0 - mdp.beta);
    let mut values = [0.0; 2];
    let mut last_change = f64::INFINITY;
    for it in 1..=MAX_VALUE_ITERATIONS {
        let mut next = [0.0; 2];
        for (s, v) in next.iter_mut().enumerate() {
            let q = q_values(mdp, lambda, &values, s);
            *v = q[0].max(q[1]);
        }
        last_change = (next[0] - values[0]).abs().max((next[1] - values[1]).abs());
        values = next;
        if last_change < threshold {
            let mut actions = [PASSIVE; 2];
            for (s, a) in actions.iter_mut().enumerate() {
                let q = q_values(mdp, lambda, &values, s);
                if q[ACTIVE] > q[PASSIVE] {
                    *a = ACTIVE;
                }
            }
            return Ok(SubsidizedSolution {
                values,
                actions,
                iterations: it,
            });
        }
    }
    Err(SolverError::NoConvergence {
        iterations: MAX_VALUE_ITERATIONS,
        last_change,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhittleIndex {
    pub value: f64,
    /// The greedy action did not change sign across the search bracket, so
    /// `value` is a bracket endpoint.
    pub clamped: bool,
}

/// Search bracket half-width for the subsidy.
pub fn subsidy_bound(mdp: &ArmMdp) -> f64 {
    let r = mdp.reward[0].abs().max(mdp.reward[1].abs());
    1.0 + r / (1.0 - mdp.beta)
}

/// Bisects on the subsidy until the bracket is narrower than `tol`.
pub fn whittle_index(mdp: &ArmMdp, state: usize, tol: f64, value_tol: f64) -> Result<WhittleIndex, SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::InvalidParameter(format!("bisection tolerance {tol} must be positive")));
    }
    let bound = subsidy_bound(mdp);
    let (mut lo, mut hi) = (-bound, bound);
    let acts = |lambda: f64| subsidized_value(mdp, lambda, value_tol).map(|s| s.actions[state] == ACTIVE);
    if !acts(lo)? {
        log::warn!("no sign change for state {state}: passive even at subsidy {lo}");
        return Ok(WhittleIndex { value: lo, clamped: true });
    }
    if acts(hi)? {
        log::warn!("no sign change for state {state}: active even at subsidy {hi}");
        return Ok(WhittleIndex { value: hi, clamped: true });
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if acts(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(WhittleIndex {
        value: 0.5 * (lo + hi),
        clamped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub budget: usize,
    pub horizon: usize,
    pub episodes: usize,
    pub beta: f64,
    pub value_tol: f64,
    pub index_tol: f64,
    /// Probability each arm starts an episode in the engaged state.
    pub initial_good_prob: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            budget: 20,
            horizon: 12,
            episodes: 10,
            beta: 0.9,
            value_tol: 1e-6,
            index_tol: 1e-4,
            initial_good_prob: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidParameter(m));
        if self.budget == 0 || self.horizon == 0 || self.episodes == 0 {
            return bad("budget, horizon and episodes must all be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta {} not in [0, 1)", self.beta));
        }
        if !(self.value_tol > 0.0 && self.index_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.initial_good_prob) {
            return bad(format!("initial_good_prob {} not in [0, 1]", self.initial_good_prob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub rounds: usize,
    pub episodes: usize,
    pub budget: usize,
    pub n_arms: usize,
    /// `action_log[episode][round]`: arms acted on, ascending.
    pub action_log: Vec<Vec<Vec<usize>>>,
    /// `state_log[episode][round][arm]`: state when the round's action was chosen.
    pub state_log: Vec<Vec<Vec<u8>>>,
    /// `final_states[episode][arm]` after the last round.
    pub final_states: Vec<Vec<u8>>,
    /// Rounds acted, summed over episodes.
    pub allocation_count: Vec<u64>,
    /// Arms in the engaged state after each round's transition, summed.
    pub total_engagement: u64,
    /// Per-arm `[index(state 0), index(state 1)]`; empty for the random policy.
    pub indices: Vec<[f64; 2]>,
    pub clamped_indices: usize,
}

impl SimulationResult {
    pub fn acts_per_round(&self) -> usize {
        self.budget.min(self.n_arms)
    }

    pub fn total_actions(&self) -> u64 {
        self.allocation_count.iter().sum()
    }

    /// `arm_id, <bucket per feature>, allocation_count, final_good, final_bad`.
    pub fn write_csv<W: Write>(&self, cohort: &Cohort, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["arm_id".to_string()];
        header.extend(FeatureGroup::ALL.iter().map(|g| g.name().to_string()));
        header.extend(["allocation_count", "final_good", "final_bad"].map(String::from));
        w.write_record(&header)?;
        for arm in &cohort.arms {
            let good = self.final_states.iter().filter(|e| e[arm.arm_id] == 1).count();
            let mut row = vec![arm.arm_id.to_string()];
            row.extend(FeatureGroup::ALL.iter().map(|g| arm.buckets.get(*g).to_string()));
            row.push(self.allocation_count[arm.arm_id].to_string());
            row.push(good.to_string());
            row.push((self.episodes - good).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds each arm's MDP by evaluating the reward at both resultant states.
pub fn arm_mdps(cohort: &Cohort, reward: &RewardAst, beta: f64) -> Result<Vec<ArmMdp>, SimError> {
    cohort
        .arms
        .iter()
        .map(|arm| {
            let feats = arm.features();
            let mut r = [0.0; 2];
            for (s, slot) in r.iter_mut().enumerate() {
                *slot = reward.evaluate(s, &feats).map_err(|source| SimError::RewardEval {
                    arm_id: arm.arm_id,
                    state: s,
                    source,
                })?;
            }
            Ok(ArmMdp {
                transitions: arm.transitions,
                reward: r,
                beta,
            })
        })
        .collect()
}

/// Both states' indices for every arm, computed once per cohort and reward.
pub fn index_table(mdps: &[ArmMdp], cfg: &SimConfig) -> Result<Vec<[WhittleIndex; 2]>, SolverError> {
    mdps.par_iter()
        .map(|m| {
            Ok([
                whittle_index(m, 0, cfg.index_tol, cfg.value_tol)?,
                whittle_index(m, 1, cfg.index_tol, cfg.value_tol)?,
            ])
        })
        .collect()
}

/// Arms with the `budget` largest priorities; ties broken by lower arm id.
pub fn top_budget(priorities: &[f64], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..priorities.len()).collect();
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]).then(a.cmp(&b)));
    order.truncate(budget.min(priorities.len()));
    order.sort_unstable();
    order
}

enum Selector<'a> {
    Whittle(&'a [[WhittleIndex; 2]]),
    Uniform,
}

struct Episode {
    actions: Vec<Vec<usize>>,
    states: Vec<Vec<u8>>,
    final_states: Vec<u8>,
    engagement: u64,
}

/// Episode `e` draws states from stream `2e` and random selections from
/// stream `2e + 1` of the seeded generator, so the two policies see the same
/// state noise and the result does not depend on scheduling.
fn run_episode(arms: &[ArmProfile], selector: &Selector<'_>, cfg: &SimConfig, seed: u64, episode: usize) -> Episode {
    let mut state_rng = ChaCha8Rng::seed_from_u64(seed);
    state_rng.set_stream(2 * episode as u64);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    pick_rng.set_stream(2 * episode as u64 + 1);

    let n = arms.len();
    let b = cfg.budget.min(n);
    let mut state: Vec<u8> = (0..n)
        .map(|_| u8::from(state_rng.random::<f64>() < cfg.initial_good_prob))
        .collect();
    let mut ep = Episode {
        actions: Vec::with_capacity(cfg.horizon),
        states: Vec::with_capacity(cfg.horizon),
        final_states: Vec::new(),
        engagement: 0,
    };
    let mut priorities = vec![0.0; n];
    for _ in 0..cfg.horizon {
        let chosen = match selector {
            Selector::Whittle(table) => {
                for (p, (idx, s)) in priorities.iter_mut().zip(table.iter().zip(&state)) {
                    *p = idx[*s as usize].value;
                }
                top_budget(&priorities, b)
            }
            Selector::Uniform => {
                let mut v = sample(&mut pick_rng, n, b).into_vec();
                v.sort_unstable();
                v
            }
        };
        let mut acted = vec![false; n];
        for &i in &chosen {
            acted[i] = true;
        }
        ep.states.push(state.clone());
        for (i, arm) in arms.iter().enumerate() {
            let p = arm.transitions.p_good(state[i] as usize, usize::from(acted[i]));
            state[i] = u8::from(state_rng.random::<f64>() < p);
        }
        ep.engagement += state.iter().map(|&s| u64::from(s)).sum::<u64>();
        ep.actions.push(chosen);
    }
    ep.final_states = state;
    ep
}

fn simulate(cohort: &Cohort, selector: Selector<'_>, cfg: &SimConfig, seed: u64) -> SimulationResult {
    let episodes: Vec<Episode> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| run_episode(&cohort.arms, &selector, cfg, seed, e))
        .collect();
    let n = cohort.len();
    let mut allocation_count = vec![0u64; n];
    let mut total_engagement = 0;
    let mut action_log = Vec::with_capacity(episodes.len());
    let mut state_log = Vec::with_capacity(episodes.len());
    let mut final_states = Vec::with_capacity(episodes.len());
    for ep in episodes {
        for round in &ep.actions {
            for &i in round {
                allocation_count[i] += 1;
            }
        }
        total_engagement += ep.engagement;
        action_log.push(ep.actions);
        state_log.push(ep.states);
        final_states.push(ep.final_states);
    }
    let (indices, clamped_indices) = match selector {
        Selector::Whittle(t) => (
            t.iter().map(|[a, b]| [a.value, b.value]).collect(),
            t.iter().flatten().filter(|w| w.clamped).count(),
        ),
        Selector::Uniform => (Vec::new(), 0),
    };
    SimulationResult {
        rounds: cfg.horizon,
        episodes: cfg.episodes,
        budget: cfg.budget,
        n_arms: n,
        action_log,
        state_log,
        final_states,
        allocation_count,
        total_engagement,
        indices,
        clamped_indices,
    }
}

/// Whittle-index policy: every round act on the arms whose current-state
/// index is among the top `budget`.
pub fn simulate_policy(cohort: &Cohort, reward: &RewardAst, cfg: &SimConfig, seed: u64) -> Result<SimulationResult, SimError> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(SimError::InvalidParameter("empty cohort".into()));
    }
    let mdps = arm_mdps(cohort, reward, cfg.beta)?;
    let table = index_table(&mdps, cfg)?;
    Ok(simulate(cohort, Selector::Whittle(&table), cfg, seed))
}

/// Baseline acting on `budget` arms drawn uniformly without replacement.
pub fn simulate_uniform(cohort: &Cohort, cfg: &SimConfig, seed: u64) -> Result<SimulationResult, SimError> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(SimError::InvalidParameter("empty cohort".into()));
    }
    Ok(simulate(cohort, Selector::Uniform, cfg, seed))
}
