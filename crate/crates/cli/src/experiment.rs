//! Running configs over seeds and executing searches.

use std::path::Path;

use anyhow::{Context, Result};
use dicl_core::trainer::run_sequence;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::metrics::{BestRecord, Record, RunRecord, SummaryRecord, TrialRecord};
use crate::search::{random_search, select_best, SearchSpace, TrialScore};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "DICL_WORKERS";

/// Thread pool sized from [`WORKERS_ENV`], or rayon's default.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{WORKERS_ENV}={v:?}"))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

pub fn run_one(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let stream = cfg.dataset.load(seed)?;
    let tc = cfg.train_config(seed);
    let result = run_sequence(&tc, &stream).with_context(|| format!("{} seed {seed}", cfg.method_label()))?;
    Ok(RunRecord {
        config_hash: cfg.hash(),
        seed,
        dataset: cfg.dataset.label(),
        method: cfg.method_label(),
        variant: cfg.method.variant.to_string(),
        ablation: serde_json::to_value(cfg.training.ablation)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        target_accuracy: result.target_accuracy,
        target_macro_f1: result.target_macro_f1,
        source_val_accuracy: result.source_val_accuracy,
        bwt: result.bwt,
        accuracy_matrix: result.accuracy_matrix.rows,
        priors: result.priors,
    })
}

/// Runs every (config, seed) pair in parallel; output keeps input order.
pub fn run_many(jobs: &[(&ExperimentConfig, u64)]) -> Result<Vec<RunRecord>> {
    jobs.par_iter().map(|(c, s)| run_one(c, *s)).collect()
}

/// Per-seed records followed by their summary.
pub fn run_config(cfg: &ExperimentConfig) -> Result<Vec<Record>> {
    let jobs: Vec<_> = cfg.seeds.iter().map(|&s| (cfg, s)).collect();
    let runs = run_many(&jobs)?;
    let summary = SummaryRecord::from_runs(&runs).context("no seeds")?;
    let mut out: Vec<Record> = runs.into_iter().map(Record::Run).collect();
    out.push(Record::Summary(summary));
    Ok(out)
}

pub struct SearchOutcome {
    pub trials: Vec<TrialRecord>,
    pub best: BestRecord,
    pub best_config: ExperimentConfig,
    pub best_runs: Vec<RunRecord>,
}

impl SearchOutcome {
    pub fn records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self.trials.iter().cloned().map(Record::Trial).collect();
        out.push(Record::Best(self.best.clone()));
        out.extend(self.best_runs.iter().cloned().map(Record::Run));
        if let Some(s) = SummaryRecord::from_runs(&self.best_runs) {
            out.push(Record::Summary(s));
        }
        out
    }
}

/// Random search over `cfg.seeds`; the winner is chosen on mean source
/// validation accuracy and its per-seed runs are reported.
pub fn run_search(cfg: &ExperimentConfig, n_trials: usize, search_seed: u64) -> Result<SearchOutcome> {
    let space = SearchSpace::for_config(cfg);
    let trials = random_search(cfg, &space, n_trials, search_seed)?;
    anyhow::ensure!(!trials.is_empty(), "search needs at least one trial");
    let jobs: Vec<_> = trials
        .iter()
        .flat_map(|t| cfg.seeds.iter().map(move |&s| (&t.config, s)))
        .collect();
    let runs: Vec<Result<RunRecord>> = jobs.par_iter().map(|(c, s)| run_one(c, *s)).collect();
    let per_trial: Vec<Option<Vec<RunRecord>>> = runs
        .chunks(cfg.seeds.len())
        .map(|rs| rs.iter().map(|r| r.as_ref().ok().cloned()).collect())
        .collect();
    let n = cfg.seeds.len() as f64;
    let records: Vec<TrialRecord> = trials
        .iter()
        .zip(runs.chunks(cfg.seeds.len()))
        .zip(&per_trial)
        .map(|((t, raw), ok)| {
            let mean = |f: fn(&RunRecord) -> f64| ok.as_ref().map(|rs| rs.iter().map(f).sum::<f64>() / n);
            TrialRecord {
                config_hash: t.config.hash(),
                seeds: cfg.seeds.clone(),
                search_seed,
                trial: t.index,
                values: t.values.clone(),
                source_val_accuracy: mean(|r| r.source_val_accuracy),
                target_accuracy: mean(|r| r.target_accuracy),
                error: raw.iter().find_map(|r| r.as_ref().err().map(|e| format!("{e:#}"))),
            }
        })
        .collect();
    let scores: Vec<TrialScore> = records
        .iter()
        .map(|r| TrialScore {
            index: r.trial,
            source_val_accuracy: r.source_val_accuracy.unwrap_or(f64::NAN),
            target_accuracy: r.target_accuracy.unwrap_or(f64::NAN),
        })
        .collect();
    let w = select_best(&scores).context("every trial failed")?;
    let win = &records[w];
    let best_config = trials[w].config.clone();
    Ok(SearchOutcome {
        best: BestRecord {
            config_hash: win.config_hash.clone(),
            seeds: cfg.seeds.clone(),
            search_seed,
            trial: win.trial,
            values: win.values.clone(),
            dataset: cfg.dataset.label(),
            method: best_config.method_label(),
            source_val_accuracy: scores[w].source_val_accuracy,
            target_accuracy: scores[w].target_accuracy,
        },
        best_runs: per_trial[w].clone().expect("winner has finished runs"),
        best_config,
        trials: records,
    })
}

/// Writes the stream the config produces under `seed` as a CSV file.
pub fn gen_data(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<()> {
    let stream = cfg.dataset.load(seed)?;
    stream.write_csv(path)?;
    Ok(())
}
