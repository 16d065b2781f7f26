//! Config-driven experiment grid: languages × prompts × alphas × runs.

mod config;
mod report;
mod runner;

pub use config::{load_config, CohortSection, ConfigError, ExperimentConfig, GatewaySection, ProviderKind};
pub use report::{emit_report, load_records, mean_stderr, ReportError};
pub use runner::{
    cell_seed, execute_cell, grid, read_json, replay_record, run_experiment, simulation_seed, write_atomic, CellKey,
    CellResult, ExperimentError, GatewayFactory, ReplayOutcome, RunLayout, RunOptions, RunRecord, RunSummary,
    SEARCH_FAILED,
};
pub mod columns {
    pub use super::report::{
        ABSOLUTE_BY_LANGUAGE_HEADER, ABSOLUTE_BY_PROMPT_HEADER, ACCEPTABLE_HEADER, RELATIVE_BY_LANGUAGE_HEADER,
        RELATIVE_BY_PROMPT_HEADER, SHARE_HEADER, SUCCESS_HEADER,
    };
}
