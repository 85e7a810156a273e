//! Closed-loop model improvement at desk scale.
//!
//! The crate wires a full improve-from-production loop around a deterministic
//! count-based text classifier: synthesize realistic noisy inference logs,
//! diagnose failures into a taxonomy, curate corrective training data under
//! composition and quality constraints, search the joint (data, hyperparameter,
//! strategy) pipeline space with Monte Carlo graph search, and promote new
//! checkpoints only through regression gates with rollback.
//!
//! Everything is seeded and deterministic: the same seed and config produce
//! byte-identical logs, trajectories, and reports.

pub mod audit;
pub mod curation;
pub mod gates;
pub mod harness;
pub mod perturb;
pub mod pipeline;
pub mod report;
pub mod search;
pub mod seeds;
pub mod task;
pub mod trace;

pub use pipeline::{
    Composition, DatasetSpec, Example, HyperConfig, Mode, Pipeline, Provenance, Slice,
    StrategySpec, SupervisionFormat, ValidationReport, Violation,
};
pub use task::{ToyModel, ToyTaskSpec, Verdict};
