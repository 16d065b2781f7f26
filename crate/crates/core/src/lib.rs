//! Fairness auditing of LLM-designed reward functions for restless bandits.
//!
//! Synthetic cohorts ([`environment`]), a sandboxed reward expression
//! language ([`reward_dsl`]), Whittle-index planning and simulation
//! ([`whittle`]), allocation fairness metrics ([`fairness`]), an LLM
//! gateway ([`gateway`]), the propose/simulate/reflect search loop
//! ([`search`]) and the experiment grid that ties them together
//! ([`experiment`]).

pub mod environment;
pub mod experiment;
pub mod fairness;
pub mod gateway;
pub mod reward_dsl;
pub mod search;
pub mod whittle;

pub use environment::{generate_cohort, ArmProfile, Cohort, CohortConfig, FeatureGroup, FeatureSchema, NUM_SLOTS};
pub use experiment::{load_config, run_experiment, ExperimentConfig, RunOptions, RunRecord};
pub use fairness::{fairness_report, FairnessReport};
pub use gateway::{CompletionProvider, Gateway, GatewayError, ScriptEntry, ScriptedProvider};
pub use reward_dsl::{parse, ParseError, RewardAst};
pub use search::{run_search, GoalPrompt, SearchConfig, SearchOutcome};
pub use whittle::{simulate_policy, simulate_uniform, whittle_index, SimConfig, SimulationResult};
