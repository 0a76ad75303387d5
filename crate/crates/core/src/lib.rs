//! Closed-loop failure correction for end-to-end driving planners.
//!
//! A planner is evaluated on bird's-eye-view scenes, its collisions are mined
//! and explained against a keyword taxonomy, an agent turns explanations into
//! layout requirements, and a layout-conditioned video generator synthesizes
//! new training scenes. [`engine::run_loop`] wires the stages together.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod autodiff;
pub mod collision;
pub mod engine;
pub mod error;
pub mod forge;
pub mod generator;
pub mod planner;
pub mod scene;
pub mod taxonomy;
pub mod tensor;

pub use engine::{run_loop, EngineConfig, RunManifest};
pub use error::{Error, Result};
pub use planner::{KnnPlanner, PlannerConfig, PlannerModel};
pub use scene::{BevScene, Dataset, ViewConfig};
