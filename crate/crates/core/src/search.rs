//! Evolutionary reward search: propose expressions with the generation
//! prompt, simulate each, let a reflection call pick one, and feed the pick
//! back as history for the next generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{Cohort, FeatureGroup, FeatureSchema, NUM_SLOTS, SLOT_LABELS};
use crate::fairness::allocation_rates;
use crate::gateway::{CompletionRequest, Gateway, GatewayError, TranscriptEvent};
use crate::reward_dsl::{extract_candidate, parse, validate, RewardAst, ValidationReport, MAX_PROBES};
use crate::whittle::{simulate_policy, SimConfig, SimulationResult};

/// Placeholder rendered into the history slot before anything was chosen.
pub const EMPTY_HISTORY: &str = "(none)";

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("search failed: no generation out of {generations} produced a valid choice")]
    SearchFailed { generations: usize },
    #[error("invalid search parameter: {0}")]
    InvalidParameter(String),
}

/// A natural-language allocation goal with the features it is meant to move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPrompt {
    pub prompt_id: u32,
    pub language_label: String,
    pub text: String,
    pub intended_features: BTreeSet<FeatureGroup>,
    pub intended_buckets: BTreeMap<FeatureGroup, BTreeSet<usize>>,
}

pub type AllocationSummary = BTreeMap<FeatureGroup, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub raw_llm_text: String,
    /// Extracted expression text; `None` when no `$$$` block was found.
    pub expression_text: Option<String>,
    pub ast: Option<RewardAst>,
    pub validation: ValidationReport,
    pub simulation: Option<SimulationResult>,
    pub allocation_summary: Option<AllocationSummary>,
}

impl Candidate {
    /// Runs extraction, parsing and probe validation on one response.
    pub fn from_response(raw: String, probes: &[[f64; NUM_SLOTS]]) -> Candidate {
        let expression = match extract_candidate(&raw) {
            Ok(e) => e,
            Err(e) => {
                return Candidate {
                    raw_llm_text: raw,
                    expression_text: None,
                    ast: None,
                    validation: ValidationReport::rejected(format!("extraction: {e}")),
                    simulation: None,
                    allocation_summary: None,
                }
            }
        };
        let (ast, validation) = match parse(&expression) {
            Ok(ast) => {
                let report = validate(&ast, probes);
                (Some(ast), report)
            }
            Err(e) => (None, ValidationReport::rejected(format!("parse ({}): {e}", e.code()))),
        };
        Candidate {
            raw_llm_text: raw,
            expression_text: Some(expression),
            ast,
            validation,
            simulation: None,
            allocation_summary: None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.ast.is_some() && self.validation.is_valid()
    }

    pub fn is_simulated(&self) -> bool {
        self.simulation.is_some() && self.allocation_summary.is_some()
    }

    /// Canonical text of the parsed expression, falling back to the raw extraction.
    pub fn display_expression(&self) -> String {
        match (&self.ast, &self.expression_text) {
            (Some(ast), _) => ast.canonical(),
            (None, Some(e)) => e.clone(),
            (None, None) => String::new(),
        }
    }

    /// Copy with the per-round logs dropped; counts and totals are kept.
    pub fn without_logs(&self) -> Candidate {
        let mut c = self.clone();
        if let Some(sim) = &mut c.simulation {
            sim.action_log.clear();
            sim.state_log.clear();
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    /// Parsed from the reflection response.
    Reflection,
    /// Reflection response unusable; picked by intended-bucket share.
    Fallback,
    /// Only one simulated candidate; no reflection call made.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub method: SelectionMethod,
    pub reflection_raw_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub candidates: Vec<Candidate>,
    pub chosen_index: Option<usize>,
    pub selection_method: Option<SelectionMethod>,
    pub reflection_raw_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub generations: Vec<GenerationRecord>,
    pub final_candidate: Candidate,
    pub reward_history: Vec<String>,
}

impl SearchOutcome {
    /// Drops per-round logs from every candidate except the final one.
    pub fn compact(&self) -> SearchOutcome {
        SearchOutcome {
            generations: self
                .generations
                .iter()
                .map(|g| GenerationRecord {
                    candidates: g.candidates.iter().map(Candidate::without_logs).collect(),
                    ..g.clone()
                })
                .collect(),
            final_candidate: self.final_candidate.clone(),
            reward_history: self.reward_history.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub candidates: usize,
    pub generations: usize,
    pub generation_temperature: f64,
    pub reflection_temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidates: 3,
            generations: 5,
            generation_temperature: 1.0,
            reflection_temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.candidates == 0 || self.generations == 0 {
            return Err(SearchError::InvalidParameter(
                "candidates and generations must be at least 1".into(),
            ));
        }
        if !(self.generation_temperature >= 0.0 && self.reflection_temperature >= 0.0) {
            return Err(SearchError::InvalidParameter("temperatures must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn render_generation_prompt(goal: &GoalPrompt, history: &[String]) -> String {
    let history = if history.is_empty() {
        EMPTY_HISTORY.to_string()
    } else {
        history.join("\n")
    };
    let mut features = String::new();
    for (i, label) in SLOT_LABELS.iter().enumerate() {
        let _ = writeln!(features, "{i}. {label}");
    }
    let g = &goal.text;
    format!(
        "Create a Python reward function for RL in a resource allocation problem for agents, \
with the objective of prioritizing higher states and {g}.The function should use state (value is either 0 or 1) \
and features agent_feats (length 34 array) to direct the RL agent. Here is a description of the features you may use \
along with their index in the agent_feats array:

Feature Descriptions:
{features}
Your task: Write a simple, single-line Python reward function. Exclude the word return and non-standard libraries. \
Format your code with triple $ symbols: $$$[YOUR FUNCTION]$$$. Note that HIGHER states are always preferred, \
so ensure the reward increases as the state value increases. Make sure the reward is always positive and increasing with state.

Example Prompt: Prioritize agents that have low Age and speak Marathi.
Let's think about this step by step. We want to give reward only for agents that are lower by age, which corresponds \
to feature 0 and to a lesser degree feature 1, and speaking Marathi which corresponds to feature 6. This corresponds \
to a condition of ((agent_feats[0] or agent_feats[1]) and agent_feats[6]). Since feature 0 corresponds better to lower \
age than feature 1, the weight assigned to feature 0 should be higher than that assigned to feature 1. In addition, \
we always only want to give reward when the state is 1, since the agent gets reward only when it is in a listening \
state. Therefore, our reward function should be: state * ((5*agent_feats[0]+agent_feats[1]) and agent_feats[6])
Example Response:
$$$ state + state * ((agent_feats[0] or agent_feats[1]) and agent_feats[6]) $$$ or \
$$$ state * (agent_feats[0] or 3*agent_feats[6]) $$$ or \
$$$ state + 2*state * ((5*agent_feats[0]+agent_feats[1]) and agent_feats[6]) $$$.
In these example, agent_feats[0] and agent_feats[1] represent agents with low values for age, agent_feats[6] \
represents agents who speak Marathi.
It is upto you to decide which features will represent a preference
Come up with a unique new reward for the specified goal: {g}. Here are your best previous attempts: {history}.
"
    )
}

/// Probe vectors for validation: the cohort's distinct feature vectors.
pub fn probe_vectors(cohort: &Cohort) -> Vec<[f64; NUM_SLOTS]> {
    cohort.distinct_features(MAX_PROBES)
}

/// Requests `m` completions and runs each through extract, parse and validate.
pub fn propose_candidates(
    gateway: &Gateway,
    prompt_text: &str,
    m: usize,
    probes: &[[f64; NUM_SLOTS]],
    cfg: &SearchConfig,
    tag: &str,
) -> Result<Vec<Candidate>, GatewayError> {
    (0..m)
        .map(|k| {
            let resp = gateway.complete(&CompletionRequest {
                prompt_text: prompt_text.to_string(),
                temperature: cfg.generation_temperature,
                max_output_tokens: cfg.max_output_tokens,
                request_tag: format!("generation {tag} cand={k}"),
            })?;
            Ok(Candidate::from_response(resp.text, probes))
        })
        .collect()
}

/// Simulates every valid candidate with the same seed.
pub fn evaluate_candidates(candidates: &mut [Candidate], cohort: &Cohort, sim: &SimConfig, seed: u64) {
    let schema = FeatureSchema::standard();
    candidates.par_iter_mut().filter(|c| c.is_valid()).for_each(|c| {
        let ast = c.ast.as_ref().expect("valid candidates carry an AST");
        match simulate_policy(cohort, ast, sim, seed) {
            Ok(result) => {
                c.allocation_summary = Some(allocation_rates(&result, cohort, &schema).share_summary());
                c.simulation = Some(result);
            }
            Err(e) => {
                c.validation.failure_reason = Some(format!("simulation aborted: {e}"));
            }
        }
    });
}

/// Indices of simulated candidates, in order; these are what reflection sees.
fn listed(candidates: &[Candidate]) -> Vec<usize> {
    (0..candidates.len()).filter(|&i| candidates[i].is_simulated()).collect()
}

pub fn render_reflection_prompt(goal: &GoalPrompt, candidates: &[Candidate]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "You are choosing a reward function for a resource allocation problem.\nGoal: {}\n",
        goal.text
    );
    let _ = writeln!(
        out,
        "Each candidate below was simulated on the same cohort. For every feature, the numbers are the share of all \
allocations received by each bucket, lowest bucket first.\n"
    );
    for (number, &i) in listed(candidates).iter().enumerate() {
        let c = &candidates[i];
        let _ = writeln!(out, "Candidate {}: {}", number + 1, c.display_expression());
        if let Some(summary) = &c.allocation_summary {
            for (group, shares) in summary {
                let shares: Vec<String> = shares.iter().map(|s| format!("{s:.3}")).collect();
                let _ = writeln!(out, "  {}: {}", group.name(), shares.join(", "));
            }
        }
        out.push('\n');
    }
    out.push_str(
        "Which candidate's allocation best matches the goal while still prioritizing all? \
Reply with the candidate number on its own line in the form \"ANSWER: <k>\".\n",
    );
    out
}

/// Total share of the goal's targeted buckets, summed over intended features.
pub fn intended_share(candidate: &Candidate, goal: &GoalPrompt) -> f64 {
    let Some(summary) = &candidate.allocation_summary else {
        return f64::NEG_INFINITY;
    };
    goal.intended_buckets
        .iter()
        .map(|(g, buckets)| {
            let shares = summary.get(g).map(Vec::as_slice).unwrap_or(&[]);
            buckets.iter().filter_map(|&b| shares.get(b)).sum::<f64>()
        })
        .sum()
}

/// Last `ANSWER: k` in the text, 1-based as written.
pub fn parse_answer(text: &str) -> Option<usize> {
    let re = Regex::new(r"(?i)answer\s*:\s*\**\s*(\d+)").expect("static regex");
    re.captures_iter(text).last().and_then(|c| c[1].parse().ok())
}

/// Chooses among the simulated candidates, asking the gateway only when
/// there is more than one.
pub fn select_candidate(
    gateway: &Gateway,
    reflection_prompt: &str,
    candidates: &[Candidate],
    goal: &GoalPrompt,
    cfg: &SearchConfig,
    tag: &str,
) -> Result<Option<Selection>, GatewayError> {
    let options = listed(candidates);
    match options.len() {
        0 => return Ok(None),
        1 => {
            log::info!("{tag}: single simulated candidate, reflection skipped");
            return Ok(Some(Selection {
                index: options[0],
                method: SelectionMethod::Single,
                reflection_raw_text: None,
            }));
        }
        _ => {}
    }
    let resp = gateway.complete(&CompletionRequest {
        prompt_text: reflection_prompt.to_string(),
        temperature: cfg.reflection_temperature,
        max_output_tokens: cfg.max_output_tokens,
        request_tag: format!("reflection {tag}"),
    })?;
    let parsed = parse_answer(&resp.text).filter(|k| (1..=options.len()).contains(k));
    let (index, method) = match parsed {
        Some(k) => (options[k - 1], SelectionMethod::Reflection),
        None => {
            let mut best = options[0];
            for &i in &options[1..] {
                if intended_share(&candidates[i], goal) > intended_share(&candidates[best], goal) {
                    best = i;
                }
            }
            log::warn!("{tag}: unusable reflection answer, fell back to candidate {best}");
            (best, SelectionMethod::Fallback)
        }
    };
    Ok(Some(Selection {
        index,
        method,
        reflection_raw_text: Some(resp.text),
    }))
}

pub fn run_search(
    goal: &GoalPrompt,
    cohort: &Cohort,
    cfg: &SearchConfig,
    sim: &SimConfig,
    sim_seed: u64,
    gateway: &Gateway,
    run_tag: &str,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let probes = probe_vectors(cohort);
    let mut history: Vec<String> = Vec::new();
    let mut generations = Vec::with_capacity(cfg.generations);
    let mut final_candidate: Option<Candidate> = None;
    for generation in 0..cfg.generations {
        let tag = format!("{run_tag} gen={generation}");
        let prompt = render_generation_prompt(goal, &history);
        let mut candidates = propose_candidates(gateway, &prompt, cfg.candidates, &probes, cfg, &tag)?;
        evaluate_candidates(&mut candidates, cohort, sim, sim_seed);
        for (k, c) in candidates.iter().enumerate() {
            gateway.log_event(&TranscriptEvent::Validation {
                generation,
                candidate: k,
                expression: c.expression_text.clone(),
                report: c.validation.clone(),
            })?;
        }
        let selection = if listed(&candidates).len() > 1 {
            let reflection = render_reflection_prompt(goal, &candidates);
            select_candidate(gateway, &reflection, &candidates, goal, cfg, &tag)?
        } else {
            select_candidate(gateway, "", &candidates, goal, cfg, &tag)?
        };
        gateway.log_event(&TranscriptEvent::Choice {
            generation,
            chosen_index: selection.as_ref().map(|s| s.index),
            method: selection
                .as_ref()
                .map_or("none".to_string(), |s| format!("{:?}", s.method).to_lowercase()),
        })?;
        if let Some(sel) = &selection {
            let chosen = &candidates[sel.index];
            history.push(chosen.display_expression());
            final_candidate = Some(chosen.clone());
        } else {
            log::warn!("{tag}: no valid candidates");
        }
        generations.push(GenerationRecord {
            generation,
            chosen_index: selection.as_ref().map(|s| s.index),
            selection_method: selection.as_ref().map(|s| s.method),
            reflection_raw_text: selection.and_then(|s| s.reflection_raw_text),
            candidates,
        });
    }
    let final_candidate = final_candidate.ok_or(SearchError::SearchFailed {
        generations: cfg.generations,
    })?;
    Ok(SearchOutcome {
        generations,
        final_candidate,
        reward_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{generate_cohort, CohortConfig};
    use crate::gateway::{ScriptEntry, ScriptedProvider};

    const PROMPT1: &str = "While still prioritizing all, slightly prioritize those who have a low value of age.";

    fn goal1() -> GoalPrompt {
        GoalPrompt {
            prompt_id: 1,
            language_label: "en".into(),
            text: PROMPT1.into(),
            intended_features: BTreeSet::from([FeatureGroup::Age]),
            intended_buckets: BTreeMap::from([(FeatureGroup::Age, BTreeSet::from([0, 1]))]),
        }
    }

    fn scripted(entries: &[(&str, &str)]) -> Gateway {
        let entries: Vec<_> = entries
            .iter()
            .map(|(p, r)| ScriptEntry {
                tag_pattern: p.to_string(),
                response_text: r.to_string(),
            })
            .collect();
        Gateway::new(Box::new(ScriptedProvider::new(&entries).unwrap()))
    }

    fn small_sim() -> SimConfig {
        SimConfig {
            budget: 5,
            horizon: 4,
            episodes: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_prompt_slots() {
        let p = render_generation_prompt(&goal1(), &[]);
        assert!(p.contains("Here are your best previous attempts: (none)."));
        // the template carries the goal in two places
        assert_eq!(p.matches(PROMPT1).count(), 2);
        assert!(p.contains("Format your code with triple $ symbols"));
        assert!(p.contains("29. Income bracket 4 (e.g., 10001-15000)\n"));
        assert!(p.contains("0. Ages 10-20\n"));
        let p = render_generation_prompt(&goal1(), &["state".into(), "2 * state".into()]);
        assert!(p.contains("attempts: state\n2 * state."));
    }

    #[test]
    fn proposals_keep_invalid_candidates() {
        let gw = scripted(&[
            ("generation", "$$$ state*agent_feats[0] $$$"),
            ("generation", "no code here"),
            ("generation", "$$$ state $$$"),
        ]);
        let probes = [[0.0; NUM_SLOTS]];
        let c = propose_candidates(&gw, "p", 3, &probes, &SearchConfig::default(), "t").unwrap();
        assert_eq!(c.len(), 3);
        assert!(c[0].is_valid() && c[2].is_valid());
        assert!(!c[1].is_valid());
        assert!(c[1].validation.failure_reason.as_ref().unwrap().starts_with("extraction"));
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_answer("blah\nANSWER: 2"), Some(2));
        assert_eq!(parse_answer("answer:**3**"), Some(3));
        assert_eq!(parse_answer("I like the first one"), None);
        assert_eq!(parse_answer("ANSWER: <k> ... ANSWER: 1"), Some(1));
    }

    #[test]
    fn reflection_prompt_numbering_and_purity() {
        let cohort = generate_cohort(20, 0.2, 1, &CohortConfig::default()).unwrap();
        let probes = probe_vectors(&cohort);
        let mut cands: Vec<_> = ["$$$ state $$$", "$$$ state*(1+agent_feats[0]) $$$", "$$$ 2*state $$$"]
            .iter()
            .map(|r| Candidate::from_response(r.to_string(), &probes))
            .collect();
        evaluate_candidates(&mut cands, &cohort, &small_sim(), 3);
        let a = render_reflection_prompt(&goal1(), &cands);
        let b = render_reflection_prompt(&goal1(), &cands);
        assert_eq!(a, b);
        assert!(a.contains("Candidate 1: state\n"));
        assert!(a.contains("Candidate 3: 2 * state\n"));
        assert!(a.contains(PROMPT1));
        assert!(a.contains("ANSWER: <k>"));
    }

    #[test]
    fn selection_paths() {
        let cohort = generate_cohort(20, 0.2, 1, &CohortConfig::default()).unwrap();
        let probes = probe_vectors(&cohort);
        let mut cands: Vec<_> = [
            "$$$ state $$$",
            "$$$ state*(1+50*agent_feats[0]+50*agent_feats[1]) $$$",
            "$$$ 2*state $$$",
        ]
        .iter()
        .map(|r| Candidate::from_response(r.to_string(), &probes))
        .collect();
        evaluate_candidates(&mut cands, &cohort, &small_sim(), 3);
        let cfg = SearchConfig::default();

        let gw = scripted(&[("reflection", "ANSWER: 2")]);
        let s = select_candidate(&gw, "r", &cands, &goal1(), &cfg, "t").unwrap().unwrap();
        assert_eq!((s.index, s.method), (1, SelectionMethod::Reflection));

        let gw = scripted(&[("reflection", "I like the first one")]);
        let s = select_candidate(&gw, "r", &cands, &goal1(), &cfg, "t").unwrap().unwrap();
        assert_eq!(s.method, SelectionMethod::Fallback);
        assert_eq!(s.index, 1, "age-weighted candidate has the largest intended share");

        let gw = scripted(&[("reflection", "ANSWER: 7")]);
        let s = select_candidate(&gw, "r", &cands, &goal1(), &cfg, "t").unwrap().unwrap();
        assert_eq!(s.method, SelectionMethod::Fallback);

        // a single option never reaches the (empty) script
        let gw = scripted(&[]);
        let s = select_candidate(&gw, "r", &cands[..1], &goal1(), &cfg, "t").unwrap().unwrap();
        assert_eq!((s.index, s.method), (0, SelectionMethod::Single));
    }

    #[test]
    fn identical_candidates_share_allocations() {
        let cohort = generate_cohort(20, 0.2, 1, &CohortConfig::default()).unwrap();
        let probes = probe_vectors(&cohort);
        let mut cands: Vec<_> = (0..2)
            .map(|_| Candidate::from_response("$$$ state + state*agent_feats[3] $$$".into(), &probes))
            .collect();
        evaluate_candidates(&mut cands, &cohort, &small_sim(), 11);
        assert!(cands[0].allocation_summary.is_some());
        assert_eq!(cands[0].allocation_summary, cands[1].allocation_summary);
    }

    #[test]
    fn history_threads_into_next_prompt() {
        let cohort = generate_cohort(20, 0.2, 1, &CohortConfig::default()).unwrap();
        let gw = scripted(&[
            ("gen=0", "$$$ state*agent_feats[0] $$$"),
            ("gen=1", "$$$ state $$$"),
        ]);
        let cfg = SearchConfig {
            candidates: 1,
            generations: 2,
            ..Default::default()
        };
        let out = run_search(&goal1(), &cohort, &cfg, &small_sim(), 5, &gw, "run").unwrap();
        assert_eq!(out.reward_history, vec!["state * agent_feats[0]", "state"]);
        assert_eq!(out.final_candidate.display_expression(), "state");
        assert_eq!(out.generations[1].selection_method, Some(SelectionMethod::Single));
    }

    #[test]
    fn all_invalid_fails() {
        let cohort = generate_cohort(10, 0.2, 1, &CohortConfig::default()).unwrap();
        let gw = scripted(&[("generation", "nope"); 6]);
        let cfg = SearchConfig {
            candidates: 2,
            generations: 3,
            ..Default::default()
        };
        let err = run_search(&goal1(), &cohort, &cfg, &small_sim(), 5, &gw, "run").unwrap_err();
        assert!(matches!(err, SearchError::SearchFailed { generations: 3 }));
    }
}
