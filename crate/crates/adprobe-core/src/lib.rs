//! Engine for block-randomized controlled experiments against blackbox
//! ad-serving systems.
//!
//! The pipeline: a validated [`experiment::ExperimentPlan`] is executed
//! against a system under test (the bundled [`simulator`] or any external
//! process speaking the same line-delimited JSON protocol), agents collect
//! ads and settings, and the [`harness`] analyzes the measurement logs with
//! a classifier-selected or keyword test statistic under a blocked
//! permutation test. Monte Carlo p-values are reported as Clopper-Pearson
//! 99% upper bounds, and families of experiments are corrected with
//! Holm-Bonferroni.

pub mod classifier;
pub mod experiment;
pub mod features;
pub mod harness;
pub mod randomizer;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod sut;

pub use experiment::{AdRecord, AgentLog, ExperimentPlan, Group, Treatment};
pub use stats::{Direction, TestResult};
