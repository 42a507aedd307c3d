//! Rank table over methods and datasets from metrics files.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{bail, Result};
use dicl_core::eval::rank_table;

use crate::metrics::{RankRecord, Record, RunRecord};

pub struct RankReport {
    pub rows: Vec<RankRecord>,
    /// Methods left out because they lack results on some dataset.
    pub dropped: Vec<String>,
}

/// Scores each (dataset, method) by mean target accuracy over its runs and
/// ranks methods per dataset. Repeated (config hash, seed) pairs count once.
pub fn rank_report(records: &[Record]) -> Result<RankReport> {
    let mut unique: BTreeMap<(&str, u64), &RunRecord> = BTreeMap::new();
    for r in records {
        if let Record::Run(run) = r {
            unique.insert((run.config_hash.as_str(), run.seed), run);
        }
    }
    let mut cells: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for run in unique.values() {
        cells
            .entry((run.method.as_str(), run.dataset.as_str()))
            .or_default()
            .push(run.target_accuracy);
    }
    if cells.is_empty() {
        bail!("no run records to report");
    }
    let datasets: BTreeSet<&str> = cells.keys().map(|(_, d)| *d).collect();
    let methods: BTreeSet<&str> = cells.keys().map(|(m, _)| *m).collect();
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut dropped = Vec::new();
    for m in &methods {
        let row: Option<Vec<f64>> = datasets
            .iter()
            .map(|d| cells.get(&(*m, *d)).map(|v| v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        match row {
            Some(r) => {
                scores.insert(m.to_string(), r);
            }
            None => dropped.push(m.to_string()),
        }
    }
    if scores.is_empty() {
        bail!("no method has results on every dataset");
    }
    let table = rank_table(&scores)?;
    let datasets: Vec<String> = datasets.iter().map(|d| d.to_string()).collect();
    let rows = table
        .into_iter()
        .map(|(method, s)| RankRecord {
            scores: scores[&method].clone(),
            method,
            datasets: datasets.clone(),
            ranks: s.ranks,
            arith_mean: s.arith_mean,
            geom_mean: s.geom_mean,
            median: s.median,
        })
        .collect();
    Ok(RankReport { rows, dropped })
}
