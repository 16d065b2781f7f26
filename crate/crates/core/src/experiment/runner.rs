//! Grid execution: one search per (language, prompt, alpha, run index),
//! persisted as it completes so an interrupted run can be resumed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ExperimentConfig, GatewaySection, ProviderKind};
use crate::environment::{generate_cohort, EnvironmentError};
use crate::fairness::{fairness_report, FairnessReport};
use crate::gateway::{
    script_from_transcript, Gateway, GatewayError, HttpProvider, ScriptEntry, ScriptedProvider, Transcript,
    UreqTransport,
};
use crate::search::{run_search, GoalPrompt, SearchError, SearchOutcome};

/// Failure reason recorded when no generation produced a usable choice.
pub const SEARCH_FAILED: &str = "search-failed";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid JSON for this tool: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("run directory {0} already holds records; pass --resume to continue it")]
    RunExists(PathBuf),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error("invalid setup: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub language: String,
    pub prompt_id: u32,
    pub alpha: f64,
    pub run_index: usize,
}

impl CellKey {
    /// File stem shared by the record, outcome and transcript of this cell.
    pub fn stem(&self) -> String {
        let lang: String = self
            .language
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!("{lang}_p{}_a{}_r{:03}", self.prompt_id, self.alpha, self.run_index)
    }

    /// Request-tag prefix; scripts can target cells by matching on it.
    pub fn tag(&self) -> String {
        format!(
            "lang={} prompt={} alpha={} run={}",
            self.language, self.prompt_id, self.alpha, self.run_index
        )
    }
}

/// `seed_base` XOR the first eight bytes of SHA-256 over the cell key.
pub fn cell_seed(seed_base: u64, key: &CellKey) -> u64 {
    let digest = Sha256::digest(format!("{}|{}|{}|{}", key.language, key.prompt_id, key.alpha, key.run_index));
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed_base ^ u64::from_be_bytes(head)
}

/// Simulation seed for a cell; kept distinct from the cohort seed.
pub fn simulation_seed(cell_seed: u64) -> u64 {
    cell_seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Result of one grid cell. Wall time is kept in `timings.jsonl` instead so
/// records of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: CellKey,
    pub seed: u64,
    pub provider_id: String,
    /// Relative to the run directory.
    pub outcome_file: Option<String>,
    pub transcript_file: String,
    pub final_expression: Option<String>,
    pub fairness: Option<FairnessReport>,
    pub failure_reason: Option<String>,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.fairness.is_some()
    }
}

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn records_dir(&self) -> PathBuf {
        self.root.join("records")
    }

    pub fn outcomes_dir(&self) -> PathBuf {
        self.root.join("outcomes")
    }

    pub fn transcripts_dir(&self) -> PathBuf {
        self.root.join("transcripts")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn timings_path(&self) -> PathBuf {
        self.root.join("timings.jsonl")
    }

    pub fn record_path(&self, key: &CellKey) -> PathBuf {
        self.records_dir().join(format!("{}.json", key.stem()))
    }

    fn create(&self) -> Result<(), ExperimentError> {
        for d in [self.records_dir(), self.outcomes_dir(), self.transcripts_dir()] {
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Every cell of the grid, in language, prompt, alpha, run order.
pub fn grid(config: &ExperimentConfig) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for goal in &config.goals {
        for &alpha in &config.cohort.alphas {
            for run_index in 0..config.runs_per_cell {
                cells.push(CellKey {
                    language: goal.language_label.clone(),
                    prompt_id: goal.prompt_id,
                    alpha,
                    run_index,
                });
            }
        }
    }
    cells
}

/// Hands out one gateway per cell. Scripted runs get a fresh provider so
/// every cell sees the script from the top; HTTP runs share one provider
/// and its rate limits.
pub enum GatewayFactory {
    Scripted {
        entries: Vec<ScriptEntry>,
        max_in_flight: usize,
        min_interval: Duration,
    },
    Shared(Gateway),
}

impl GatewayFactory {
    pub fn from_config(section: &GatewaySection) -> Result<Self, ExperimentError> {
        let min_interval = Duration::from_millis(section.min_interval_ms);
        match section.kind {
            ProviderKind::Scripted => Ok(GatewayFactory::Scripted {
                entries: section.script_entries.clone(),
                max_in_flight: section.max_in_flight,
                min_interval,
            }),
            ProviderKind::Http => {
                let api_key = match &section.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        ExperimentError::Invalid(format!("environment variable `{var}` is not set"))
                    })?),
                    None => None,
                };
                let (Some(endpoint), Some(model)) = (&section.endpoint, &section.model) else {
                    return Err(ExperimentError::Invalid("http gateway needs endpoint and model".into()));
                };
                let transport = UreqTransport::new(Duration::from_secs(section.timeout_secs));
                let provider = HttpProvider::new(endpoint, model, api_key, section.retry, Box::new(transport));
                Ok(GatewayFactory::Shared(Gateway::with_limits(
                    Box::new(provider),
                    section.max_in_flight,
                    min_interval,
                )))
            }
        }
    }

    pub fn for_cell(&self, transcript: Option<Transcript>) -> Result<Gateway, ExperimentError> {
        match self {
            GatewayFactory::Scripted {
                entries,
                max_in_flight,
                min_interval,
            } => {
                let g = Gateway::with_limits(Box::new(ScriptedProvider::new(entries)?), *max_in_flight, *min_interval);
                Ok(match transcript {
                    Some(t) => g.with_transcript(t),
                    None => g,
                })
            }
            GatewayFactory::Shared(g) => Ok(g.fork(transcript)),
        }
    }
}

/// What one cell produced, before anything is written.
pub struct CellResult {
    pub outcome: Option<SearchOutcome>,
    pub fairness: Option<FairnessReport>,
    pub failure_reason: Option<String>,
}

/// Generates the cohort, runs the search and scores the final choice.
/// Gateway and configuration errors abort; a failed search does not.
pub fn execute_cell(
    config: &ExperimentConfig,
    goal: &GoalPrompt,
    key: &CellKey,
    gateway: &Gateway,
) -> Result<CellResult, ExperimentError> {
    let seed = cell_seed(config.cohort.seed_base, key);
    let cohort = generate_cohort(config.cohort.n, key.alpha, seed, &config.cohort.cohort_config())?;
    match run_search(
        goal,
        &cohort,
        &config.search,
        &config.sim,
        simulation_seed(seed),
        gateway,
        &key.tag(),
    ) {
        Ok(outcome) => {
            let fairness = fairness_report(&outcome.final_candidate, goal, &cohort, &config.thresholds);
            let failure_reason = fairness.is_none().then(|| "final-candidate-not-simulated".to_string());
            Ok(CellResult {
                outcome: Some(outcome),
                fairness,
                failure_reason,
            })
        }
        Err(SearchError::SearchFailed { .. }) => Ok(CellResult {
            outcome: None,
            fairness: None,
            failure_reason: Some(SEARCH_FAILED.into()),
        }),
        Err(SearchError::Gateway(e)) => Err(e.into()),
        Err(SearchError::InvalidParameter(m)) => Err(ExperimentError::Invalid(m)),
    }
}

fn run_cell(
    config: &ExperimentConfig,
    layout: &RunLayout,
    factory: &GatewayFactory,
    key: &CellKey,
) -> Result<RunRecord, ExperimentError> {
    let goal = config
        .goal(&key.language, key.prompt_id)
        .ok_or_else(|| ExperimentError::Invalid(format!("no goal for {}", key.tag())))?;
    let stem = key.stem();
    let transcript_file = format!("transcripts/{stem}.jsonl");
    let transcript_path = layout.root.join(&transcript_file);
    let transcript = Transcript::create(&transcript_path).map_err(io_err(&transcript_path))?;
    let gateway = factory.for_cell(Some(transcript))?;
    let result = execute_cell(config, goal, key, &gateway)?;

    let outcome_file = match &result.outcome {
        Some(outcome) => {
            let rel = format!("outcomes/{stem}.json");
            write_json(&layout.root.join(&rel), &outcome.compact())?;
            Some(rel)
        }
        None => None,
    };
    let record = RunRecord {
        key: key.clone(),
        seed: cell_seed(config.cohort.seed_base, key),
        provider_id: gateway.provider_id().to_string(),
        outcome_file,
        transcript_file,
        final_expression: result.outcome.as_ref().map(|o| o.final_candidate.display_expression()),
        fairness: result.fairness,
        failure_reason: result.failure_reason,
    };
    // The record goes last: its presence marks the cell as done.
    write_json(&layout.record_path(key), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            resume: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub cells: usize,
    /// Cells executed by this invocation.
    pub executed: usize,
    /// Cells skipped because a record already existed.
    pub skipped: usize,
    /// Executed cells whose search failed.
    pub failed: usize,
    /// Set when an unrecoverable error stopped the run early.
    pub aborted: Option<String>,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none() && self.executed + self.skipped == self.cells
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    cell: &'a str,
    wall_ms: u128,
}

/// Runs every missing cell of the grid and, when the grid is complete,
/// writes the report under `<run_dir>/report`.
pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary, ExperimentError> {
    config.validate().map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let layout = RunLayout::new(config.run_dir());
    let has_records = fs::read_dir(layout.records_dir())
        .map(|mut d| d.any(|e| e.is_ok_and(|e| e.path().extension().is_some_and(|x| x == "json"))))
        .unwrap_or(false);
    if has_records && !opts.resume {
        return Err(ExperimentError::RunExists(layout.root.clone()));
    }
    layout.create()?;
    write_json(&layout.config_path(), config)?;

    let cells = grid(config);
    let pending: Vec<&CellKey> = cells.iter().filter(|k| !layout.record_path(k).exists()).collect();
    let skipped = cells.len() - pending.len();
    log::info!(
        "{}: {} cells, {} already done, {} to run",
        layout.root.display(),
        cells.len(),
        skipped,
        pending.len()
    );

    let factory = GatewayFactory::from_config(&config.gateway)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Invalid(format!("worker pool: {e}")))?;
    let stop = AtomicBool::new(false);
    let first_error: Mutex<Option<String>> = Mutex::new(None);
    let timings = Mutex::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(layout.timings_path())
            .map_err(io_err(&layout.timings_path()))?,
    );
    let records: Vec<RunRecord> = pool.install(|| {
        pending
            .par_iter()
            .filter_map(|key| {
                if stop.load(Ordering::SeqCst) {
                    return None;
                }
                let started = Instant::now();
                match run_cell(config, &layout, &factory, key) {
                    Ok(record) => {
                        let stem = key.stem();
                        let line = serde_json::to_string(&Timing {
                            cell: &stem,
                            wall_ms: started.elapsed().as_millis(),
                        })
                        .expect("serializable");
                        if let Err(e) = writeln!(timings.lock().unwrap(), "{line}") {
                            log::warn!("timing not recorded: {e}");
                        }
                        Some(record)
                    }
                    Err(e) => {
                        log::error!("{}: {e}", key.tag());
                        stop.store(true, Ordering::SeqCst);
                        first_error.lock().unwrap().get_or_insert_with(|| format!("{}: {e}", key.tag()));
                        None
                    }
                }
            })
            .collect()
    });

    let summary = RunSummary {
        run_dir: layout.root.clone(),
        cells: cells.len(),
        executed: records.len(),
        skipped,
        failed: records.iter().filter(|r| !r.completed()).count(),
        aborted: first_error.into_inner().unwrap(),
    };
    if summary.is_complete() {
        let all = super::report::load_records(&layout.records_dir())?;
        super::report::emit_report(&all, &layout.report_dir(), config.svg)
            .map_err(|e| ExperimentError::Invalid(format!("report: {e}")))?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub cell: String,
    pub matches: bool,
    pub original_failure: Option<String>,
    pub replayed_failure: Option<String>,
    pub original_expression: Option<String>,
    pub replayed_expression: Option<String>,
}

/// Re-executes one recorded cell against its own transcript and compares
/// the result with the stored record. Nothing in the run directory is
/// modified.
pub fn replay_record(record_path: &Path) -> Result<(ReplayOutcome, Option<FairnessReport>), ExperimentError> {
    let record: RunRecord = read_json(record_path)?;
    let root = record_path
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| ExperimentError::Invalid(format!("{} is not inside a run directory", record_path.display())))?;
    let layout = RunLayout::new(root);
    let config: ExperimentConfig = read_json(&layout.config_path())?;
    let goal = config
        .goal(&record.key.language, record.key.prompt_id)
        .ok_or_else(|| ExperimentError::Invalid(format!("no goal for {}", record.key.tag())))?;
    let transcript_path = root.join(&record.transcript_file);
    let transcript = fs::read_to_string(&transcript_path).map_err(io_err(&transcript_path))?;
    let entries = script_from_transcript(&transcript)?;
    let gateway = Gateway::new(Box::new(ScriptedProvider::new(&entries)?));
    let result = execute_cell(&config, goal, &record.key, &gateway)?;
    let replayed_expression = result.outcome.as_ref().map(|o| o.final_candidate.display_expression());
    let matches = result.fairness == record.fairness
        && result.failure_reason == record.failure_reason
        && replayed_expression == record.final_expression;
    Ok((
        ReplayOutcome {
            cell: record.key.stem(),
            matches,
            original_failure: record.failure_reason,
            replayed_failure: result.failure_reason,
            original_expression: record.final_expression,
            replayed_expression,
        },
        result.fairness,
    ))
}
