//! The correction loop: configuration, iteration driver, run persistence,
//! the keyword-distribution gap and reporting.

mod config;
mod distribution;
mod report;
mod run;

pub use config::{EngineConfig, ForgeSection, GeneratorSection, RunSection};
pub use distribution::{hellinger, keyword_distribution, vocabulary, KeywordDistribution, MAX_VOCABULARY, RESIDUAL};
pub use report::report;
pub use run::{
    run_loop, Agents, AgentSummary, ArmRecord, Distributions, IterationRecord, Ledger, RunManifest, Sizes, Status,
    FAILURES_SCHEMA, MANIFEST_SCHEMA, MANIFEST_VERSION,
};
