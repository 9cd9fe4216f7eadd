//! Discrete-event simulation and planning for tiered-SLO LLM serving with
//! adaptive tensor parallelism.

pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod migration;
pub mod par;
pub mod policy;
pub mod profile;
pub mod trace;
