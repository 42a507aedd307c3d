use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use dicl_cli::config::{parse_config, ExperimentConfig};
use dicl_cli::experiment::{gen_data, run_config, run_search, worker_pool};
use dicl_cli::metrics::{read_records, MetricsWriter, Record, WriteMode};
use dicl_cli::report::rank_report;
use dicl_core::penalties::{Method, Variant};
use dicl_core::trainer::Ablation;

/// Continual domain-invariant learning experiments.
#[derive(Parser)]
#[command(name = "dicl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one config over its seeds.
    Run(RunArgs),
    /// Random hyperparameter search; selects on source validation accuracy.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Number of trials (defaults to the config's value).
        #[arg(long)]
        trials: Option<usize>,
        /// Seed of the hyperparameter draws (defaults to the config's value).
        #[arg(long)]
        search_seed: Option<u64>,
    },
    /// Write the config's dataset as a CSV file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Rank methods across datasets from metrics files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Metrics file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "append")]
    overwrite: bool,
    #[arg(long)]
    append: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[command(flatten)]
    output: OutputArgs,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = parse_config(&self.config)?;
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if self.method.is_some() || self.variant.is_some() {
            let m = self.method.unwrap_or(cfg.method.name);
            let v = self.variant.unwrap_or(cfg.method.variant);
            cfg = cfg.with_method(m, v);
        }
        if let Some(a) = self.ablation {
            cfg.training.ablation = a;
        }
        if let Some(out) = &self.output.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl OutputArgs {
    fn writer(&self, out: Option<&PathBuf>) -> Result<MetricsWriter> {
        let mode = if self.overwrite {
            WriteMode::Overwrite
        } else if self.append {
            WriteMode::Append
        } else {
            WriteMode::CreateNew
        };
        match out {
            Some(p) => MetricsWriter::create(p, mode),
            None => Ok(MetricsWriter::stdout()),
        }
    }
}

fn emit(output: &OutputArgs, out: Option<&PathBuf>, records: &[Record]) -> Result<()> {
    let mut w = output.writer(out)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

fn execute(cli: Cli) -> Result<()> {
    let pool = worker_pool()?;
    match cli.command {
        Command::Run(args) => {
            let cfg = args.load()?;
            // open first so a path collision fails before training
            let mut w = args.output.writer(cfg.out.as_ref())?;
            for r in pool.install(|| run_config(&cfg))? {
                w.write(&r)?;
            }
            w.finish()
        }
        Command::Search {
            run,
            trials,
            search_seed,
        } => {
            let cfg = run.load()?;
            let mut w = run.output.writer(cfg.out.as_ref())?;
            let n = trials.unwrap_or(cfg.search.trials);
            let seed = search_seed.unwrap_or(cfg.search.seed);
            let outcome = pool.install(|| run_search(&cfg, n, seed))?;
            for r in outcome.records() {
                w.write(&r)?;
            }
            w.finish()
        }
        Command::GenData {
            config,
            seed,
            out,
            overwrite,
        } => {
            let cfg = parse_config(&config)?;
            if out.exists() && !overwrite {
                bail!("{} exists; pass --overwrite", out.display());
            }
            gen_data(&cfg, seed, &out)
        }
        Command::Report { files, output } => {
            let mut records = Vec::new();
            for f in &files {
                records.extend(read_records(f)?);
            }
            let report = rank_report(&records)?;
            for m in &report.dropped {
                eprintln!("warning: {m} lacks results on some dataset; left out of the ranking");
            }
            let rows: Vec<Record> = report.rows.into_iter().map(Record::Rank).collect();
            emit(&output, output.out.as_ref(), &rows)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
