//! Experiment harness: TOML configs, multi-seed runs, random search with
//! validation-only selection, dataset export and rank reports.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod search;
