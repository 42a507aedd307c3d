//! JSON-lines metrics records and the file appender.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dicl_core::stats::DomainPrior;
use serde::{Deserialize, Serialize};

/// Evaluation of one config under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub method: String,
    pub variant: String,
    pub ablation: String,
    pub target_accuracy: f64,
    pub target_macro_f1: f64,
    pub source_val_accuracy: f64,
    pub bwt: Option<f64>,
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Stored priors at the end of training.
    #[serde(default)]
    pub priors: Vec<DomainPrior>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single value.
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<MeanSe> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(MeanSe { mean, se })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dataset: String,
    pub method: String,
    pub target_accuracy: MeanSe,
    pub target_macro_f1: MeanSe,
    pub source_val_accuracy: MeanSe,
    pub bwt: Option<MeanSe>,
}

impl SummaryRecord {
    pub fn from_runs(runs: &[RunRecord]) -> Option<SummaryRecord> {
        let first = runs.first()?;
        let col = |f: fn(&RunRecord) -> f64| MeanSe::of(&runs.iter().map(f).collect::<Vec<_>>());
        let bwts: Option<Vec<f64>> = runs.iter().map(|r| r.bwt).collect();
        Some(SummaryRecord {
            config_hash: first.config_hash.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            dataset: first.dataset.clone(),
            method: first.method.clone(),
            target_accuracy: col(|r| r.target_accuracy)?,
            target_macro_f1: col(|r| r.target_macro_f1)?,
            source_val_accuracy: col(|r| r.source_val_accuracy)?,
            bwt: bwts.and_then(|b| MeanSe::of(&b)),
        })
    }
}

/// One random-search trial, averaged over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub search_seed: u64,
    pub trial: usize,
    pub values: BTreeMap<String, f64>,
    /// `None` when a run of the trial failed, for example by diverging.
    pub source_val_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub search_seed: u64,
    pub trial: usize,
    pub values: BTreeMap<String, f64>,
    pub dataset: String,
    pub method: String,
    pub source_val_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub method: String,
    pub datasets: Vec<String>,
    pub scores: Vec<f64>,
    pub ranks: Vec<f64>,
    pub arith_mean: f64,
    pub geom_mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Run(RunRecord),
    Summary(SummaryRecord),
    Trial(TrialRecord),
    Best(BestRecord),
    Rank(RankRecord),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteMode {
    /// Fails if the path exists.
    CreateNew,
    Overwrite,
    Append,
}

/// Single appender; every record becomes one line.
pub struct MetricsWriter {
    out: Box<dyn Write>,
    path: Option<PathBuf>,
}

impl MetricsWriter {
    pub fn create(path: &Path, mode: WriteMode) -> Result<Self> {
        let mut opts = OpenOptions::new();
        opts.write(true);
        match mode {
            WriteMode::CreateNew => opts.create_new(true),
            WriteMode::Overwrite => opts.create(true).truncate(true),
            WriteMode::Append => opts.create(true).append(true),
        };
        let file = opts.open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow::anyhow!("{} exists; pass --overwrite or --append", path.display())
            } else {
                anyhow::Error::new(e).context(format!("opening {}", path.display()))
            }
        })?;
        Ok(MetricsWriter {
            out: Box::new(BufWriter::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn stdout() -> Self {
        MetricsWriter {
            out: Box::new(std::io::stdout()),
            path: None,
        }
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().with_context(|| match &self.path {
            Some(p) => format!("writing {}", p.display()),
            None => "writing stdout".into(),
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => bail!("{}:{}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}
