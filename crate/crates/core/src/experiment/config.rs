//! Experiment configuration: a TOML file plus one prompt-text file per
//! language, resolved into a self-contained [`ExperimentConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::{CohortConfig, FeatureGroup, FeatureSchema};
use crate::fairness::DEFAULT_THRESHOLDS;
use crate::gateway::{load_script, RetryPolicy, ScriptEntry};
use crate::search::{GoalPrompt, SearchConfig};
use crate::whittle::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path} cannot be read: {source}")]
    MissingFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} does not match the schema: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("prompt file {path} for language `{language}` {problem}")]
    PromptFile {
        language: String,
        path: PathBuf,
        problem: String,
    },
    #[error("gateway script {path}: {message}")]
    Script { path: PathBuf, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub n: usize,
    pub alphas: Vec<f64>,
    pub seed_base: u64,
    pub weights: crate::environment::WeightVector,
    pub transitions: crate::environment::TransitionConfig,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            n: 100,
            alphas: vec![0.2, 0.8],
            seed_base: 0,
            weights: Default::default(),
            transitions: Default::default(),
        }
    }
}

impl CohortSection {
    pub fn cohort_config(&self) -> CohortConfig {
        CohortConfig {
            weights: self.weights,
            transitions: self.transitions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub kind: ProviderKind,
    /// Scripted provider: JSON file of `{tag_pattern, response_text}` entries.
    pub script: Option<PathBuf>,
    /// Filled from `script` on load; may also be given inline.
    pub script_entries: Vec<ScriptEntry>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Scripted,
            script: None,
            script_entries: Vec::new(),
            endpoint: None,
            model: None,
            api_key_env: None,
            timeout_secs: 60,
            max_in_flight: 4,
            min_interval_ms: 0,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LanguageEntry {
    label: String,
    prompts: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptEntry {
    id: u32,
    /// Feature group name -> targeted bucket indices.
    intended: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    cohort: CohortSection,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    search: SearchConfig,
    #[serde(default)]
    gateway: GatewaySection,
    #[serde(default = "default_runs")]
    runs_per_cell: usize,
    #[serde(default = "default_thresholds")]
    thresholds: Vec<f64>,
    #[serde(default = "default_output")]
    output_dir: PathBuf,
    #[serde(default)]
    svg: bool,
    #[serde(default)]
    languages: Vec<LanguageEntry>,
    #[serde(default)]
    prompts: Vec<PromptEntry>,
}

fn default_runs() -> usize {
    20
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Fully resolved experiment: prompt texts and script entries are inlined,
/// paths are absolute. Serialized as `config.json` in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cohort: CohortSection,
    pub sim: SimConfig,
    pub search: SearchConfig,
    pub gateway: GatewaySection,
    pub runs_per_cell: usize,
    pub thresholds: Vec<f64>,
    pub output_dir: PathBuf,
    pub svg: bool,
    pub languages: Vec<String>,
    /// One entry per (language, prompt), languages in config order.
    pub goals: Vec<GoalPrompt>,
}

impl ExperimentConfig {
    pub fn goal(&self, language: &str, prompt_id: u32) -> Option<&GoalPrompt> {
        self.goals
            .iter()
            .find(|g| g.language_label == language && g.prompt_id == prompt_id)
    }

    /// Short hash of everything that influences results. Output location,
    /// and where the script was read from, are left out.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.gateway.script = None;
        c.svg = false;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", self.fingerprint()))
    }

    /// Re-checks the invariants `load_config` enforces; used on snapshots.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cohort.n == 0 {
            return Err(invalid("cohort.n", "must be at least 1"));
        }
        if self.cohort.alphas.is_empty() {
            return Err(invalid("cohort.alphas", "must list at least one value"));
        }
        if let Some(a) = self.cohort.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid("cohort.alphas", format!("{a} is not in [0, 1]")));
        }
        let mut seen = BTreeSet::new();
        if let Some(a) = self.cohort.alphas.iter().find(|a| !seen.insert(a.to_bits())) {
            return Err(invalid("cohort.alphas", format!("{a} is listed twice")));
        }
        self.cohort
            .transitions
            .validate()
            .map_err(|e| invalid("cohort.transitions", e.to_string()))?;
        self.sim.validate().map_err(|e| invalid("sim", e.to_string()))?;
        self.search.validate().map_err(|e| invalid("search", e.to_string()))?;
        if self.runs_per_cell == 0 {
            return Err(invalid("runs_per_cell", "must be at least 1"));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(invalid("thresholds", format!("{t} is not a non-negative number")));
        }
        if self.languages.is_empty() {
            return Err(invalid("languages", "at least one language is required"));
        }
        if self.goals.is_empty() {
            return Err(invalid("prompts", "at least one prompt is required"));
        }
        match self.gateway.kind {
            ProviderKind::Scripted if self.gateway.script_entries.is_empty() => {
                return Err(invalid("gateway.script", "scripted gateway needs a non-empty script"));
            }
            ProviderKind::Http if self.gateway.endpoint.is_none() => {
                return Err(invalid("gateway.endpoint", "required for the http gateway"));
            }
            ProviderKind::Http if self.gateway.model.is_none() => {
                return Err(invalid("gateway.model", "required for the http gateway"));
            }
            _ => {}
        }
        if self.gateway.max_in_flight == 0 {
            return Err(invalid("gateway.max_in_flight", "must be at least 1"));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn intended_buckets(entry: &PromptEntry) -> Result<BTreeMap<FeatureGroup, BTreeSet<usize>>, ConfigError> {
    let field = format!("prompts[id={}].intended", entry.id);
    if entry.intended.is_empty() {
        return Err(invalid(field, "must name at least one feature"));
    }
    let schema = FeatureSchema::standard();
    let mut out = BTreeMap::new();
    for (name, buckets) in &entry.intended {
        let group = FeatureGroup::from_name(name)
            .ok_or_else(|| invalid(&field, format!("unknown feature group `{name}`")))?;
        if buckets.is_empty() {
            return Err(invalid(&field, format!("`{name}` lists no buckets")));
        }
        let count = schema.bucket_count(group);
        if let Some(b) = buckets.iter().find(|b| **b >= count) {
            return Err(invalid(&field, format!("`{name}` has {count} buckets; {b} is out of range")));
        }
        out.insert(group, buckets.iter().copied().collect());
    }
    Ok(out)
}

fn load_prompt_texts(language: &str, path: &Path) -> Result<BTreeMap<u32, String>, ConfigError> {
    let problem = |problem: String| ConfigError::PromptFile {
        language: language.to_string(),
        path: path.to_path_buf(),
        problem,
    };
    let text = std::fs::read_to_string(path).map_err(|e| problem(format!("cannot be read: {e}")))?;
    if text.trim().is_empty() {
        return Err(problem("is empty".into()));
    }
    let table: BTreeMap<String, String> =
        toml::from_str(&text).map_err(|e| problem(format!("is not a table of prompt texts: {e}")))?;
    let mut out = BTreeMap::new();
    for (key, value) in table {
        let id = key
            .parse::<u32>()
            .map_err(|_| problem(format!("has non-numeric prompt id `{key}`")))?;
        if value.trim().is_empty() {
            return Err(problem(format!("has an empty text for prompt {id}")));
        }
        out.insert(id, value.trim().to_string());
    }
    Ok(out)
}

/// Reads and validates a config file. Relative paths inside it resolve
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::MissingFile {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| ConfigError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));

    let mut gateway = raw.gateway;
    if let Some(script) = &gateway.script {
        let script = resolve(&base, script);
        gateway.script_entries = load_script(&script).map_err(|e| ConfigError::Script {
            path: script.clone(),
            message: e.to_string(),
        })?;
        gateway.script = Some(script);
    }

    let mut labels = BTreeSet::new();
    let mut languages = Vec::new();
    let mut goals = Vec::new();
    let mut ids = BTreeSet::new();
    for p in &raw.prompts {
        if !ids.insert(p.id) {
            return Err(invalid("prompts", format!("prompt id {} is listed twice", p.id)));
        }
    }
    for lang in &raw.languages {
        if lang.label.trim().is_empty() {
            return Err(invalid("languages.label", "must not be empty"));
        }
        if !labels.insert(lang.label.clone()) {
            return Err(invalid("languages", format!("`{}` is listed twice", lang.label)));
        }
        let file = resolve(&base, &lang.prompts);
        let texts = load_prompt_texts(&lang.label, &file)?;
        for p in &raw.prompts {
            let text = texts.get(&p.id).ok_or_else(|| ConfigError::PromptFile {
                language: lang.label.clone(),
                path: file.clone(),
                problem: format!("has no text for prompt {}", p.id),
            })?;
            let intended_buckets = intended_buckets(p)?;
            goals.push(GoalPrompt {
                prompt_id: p.id,
                language_label: lang.label.clone(),
                text: text.clone(),
                intended_features: intended_buckets.keys().copied().collect(),
                intended_buckets,
            });
        }
        languages.push(lang.label.clone());
    }

    let config = ExperimentConfig {
        cohort: raw.cohort,
        sim: raw.sim,
        search: raw.search,
        gateway,
        runs_per_cell: raw.runs_per_cell,
        thresholds: raw.thresholds,
        output_dir: resolve(&base, &raw.output_dir),
        svg: raw.svg,
        languages,
        goals,
    };
    config.validate()?;
    Ok(config)
}
