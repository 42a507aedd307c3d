//! Experiment configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dicl_core::data::{gen_rotated_moons, gen_spurious_blobs, load_csv, CsvSpec, DomainStream};
use dicl_core::model::Activation;
use dicl_core::penalties::{Method, PenaltyConfig, Variant};
use dicl_core::trainer::{Ablation, AnchorKind, Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::search::Distribution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SpuriousBlobs {
        #[serde(default = "default_k")]
        k_sources: usize,
        #[serde(default = "default_n")]
        n_per_domain: usize,
        #[serde(default = "default_strength")]
        spurious_strength: f64,
        /// Fixed data seed; the run seed is used when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    RotatedMoons {
        rotations: Vec<f64>,
        target_rotation: f64,
        #[serde(default = "default_n")]
        n_per_domain: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        domain_column: String,
        label_column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_columns: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_domain: Option<String>,
        #[serde(default)]
        balance_classes: bool,
    },
}

fn default_k() -> usize {
    4
}
fn default_n() -> usize {
    400
}
fn default_strength() -> f64 {
    0.9
}
fn default_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    /// Short name used to group results in reports.
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::SpuriousBlobs { .. } => "spurious_blobs".into(),
            DatasetSpec::RotatedMoons { .. } => "rotated_moons".into(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    pub fn load(&self, run_seed: u64) -> Result<DomainStream> {
        Ok(match self {
            DatasetSpec::SpuriousBlobs {
                k_sources,
                n_per_domain,
                spurious_strength,
                seed,
            } => gen_spurious_blobs(*k_sources, *n_per_domain, *spurious_strength, seed.unwrap_or(run_seed))?,
            DatasetSpec::RotatedMoons {
                rotations,
                target_rotation,
                n_per_domain,
                noise,
                seed,
            } => gen_rotated_moons(
                rotations.len(),
                rotations,
                *target_rotation,
                *n_per_domain,
                *noise,
                seed.unwrap_or(run_seed),
            )?,
            DatasetSpec::Csv {
                path,
                domain_column,
                label_column,
                feature_columns,
                target_domain,
                balance_classes,
            } => {
                let spec = CsvSpec {
                    domain_column: domain_column.clone(),
                    label_column: label_column.clone(),
                    feature_columns: feature_columns.clone(),
                    target_domain: target_domain.clone(),
                    balance_classes: *balance_classes,
                    seed: run_seed,
                };
                load_csv(path, &spec).with_context(|| format!("loading {}", path.display()))?
            }
        })
    }

    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::SpuriousBlobs {
                k_sources,
                n_per_domain,
                spurious_strength,
                ..
            } => {
                if *k_sources == 0 || *n_per_domain == 0 || n_per_domain % 2 != 0 {
                    bail!("spurious_blobs needs k_sources > 0 and an even n_per_domain");
                }
                if !(0.0..=1.0).contains(spurious_strength) {
                    bail!("spurious_strength must lie in [0, 1]");
                }
            }
            DatasetSpec::RotatedMoons {
                rotations,
                n_per_domain,
                noise,
                ..
            } => {
                if rotations.is_empty() || *n_per_domain == 0 || n_per_domain % 2 != 0 {
                    bail!("rotated_moons needs rotations and an even n_per_domain");
                }
                if !(*noise >= 0.0) {
                    bail!("noise must be >= 0");
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        Ok(())
    }
}

/// Method hyperparameters; missing values take the method's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: Method,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_projection: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_tau: Option<bool>,
}

fn default_variant() -> Variant {
    Variant::Tailored
}

impl MethodSpec {
    pub fn new(name: Method, variant: Variant) -> Self {
        MethodSpec {
            name,
            variant,
            lambda: None,
            beta: None,
            anneal_iters: None,
            tau: None,
            temperature: None,
            alpha: None,
            log_eps: None,
            mask_eps: None,
            kd_projection: None,
            adaptive_tau: None,
        }
    }

    /// Fills every unset field from the method defaults.
    pub fn fill_defaults(&mut self) {
        let d = PenaltyConfig::defaults(self.name, self.variant);
        self.lambda.get_or_insert(d.lambda);
        self.beta.get_or_insert(d.beta);
        self.anneal_iters.get_or_insert(d.anneal_iters);
        self.tau.get_or_insert(d.tau);
        self.temperature.get_or_insert(d.temperature);
        self.alpha.get_or_insert(d.alpha);
        self.log_eps.get_or_insert(d.log_eps);
        self.mask_eps.get_or_insert(d.mask_eps);
        self.kd_projection.get_or_insert(d.kd_projection);
        self.adaptive_tau.get_or_insert(d.adaptive_tau);
    }

    pub fn penalty(&self) -> PenaltyConfig {
        let d = PenaltyConfig::defaults(self.name, self.variant);
        PenaltyConfig {
            method: self.name,
            variant: self.variant,
            lambda: self.lambda.unwrap_or(d.lambda),
            beta: self.beta.unwrap_or(d.beta),
            anneal_iters: self.anneal_iters.unwrap_or(d.anneal_iters),
            tau: self.tau.unwrap_or(d.tau),
            temperature: self.temperature.unwrap_or(d.temperature),
            alpha: self.alpha.unwrap_or(d.alpha),
            log_eps: self.log_eps.unwrap_or(d.log_eps),
            mask_eps: self.mask_eps.unwrap_or(d.mask_eps),
            kd_projection: self.kd_projection.unwrap_or(d.kd_projection),
            adaptive_tau: self.adaptive_tau.unwrap_or(d.adaptive_tau),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSpec {
    pub steps_per_domain: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub rff_dim: usize,
    pub train_fraction: f64,
    pub prior_batch_size: usize,
    pub standardize: bool,
    pub anchor: AnchorKind,
    pub optimizer: Optimizer,
    pub ablation: Ablation,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let t = TrainConfig::new(Method::Erm, Variant::Tailored);
        TrainingSpec {
            steps_per_domain: t.steps_per_domain,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            buffer_capacity: t.buffer_capacity,
            hidden: t.hidden,
            activation: t.activation,
            rff_dim: t.rff_dim,
            train_fraction: t.train_fraction,
            prior_batch_size: t.prior_batch_size,
            standardize: t.standardize,
            anchor: t.anchor,
            optimizer: t.optimizer,
            ablation: t.ablation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpec {
    pub trials: usize,
    pub seed: u64,
    /// Replaces or adds distributions on top of the method's default space.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub space: BTreeMap<String, Distribution>,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            trials: 20,
            seed: 0,
            space: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub method: MethodSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub search: SearchSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Names accepted by [`ExperimentConfig::set_value`].
pub const TUNABLE: [&str; 13] = [
    "lr",
    "batch_size",
    "weight_decay",
    "buffer_capacity",
    "steps_per_domain",
    "rff_dim",
    "lambda",
    "beta",
    "anneal_iters",
    "tau",
    "temperature",
    "alpha",
    "prior_batch_size",
];

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, method: MethodSpec) -> Self {
        let mut c = ExperimentConfig {
            seeds: default_seeds(),
            out: None,
            dataset,
            method,
            training: TrainingSpec::default(),
            search: SearchSpec::default(),
        };
        c.method.fill_defaults();
        c
    }

    /// Parses and validates a TOML document, filling method defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        cfg.method.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        self.dataset.validate()?;
        self.train_config(self.seeds[0]).validate()?;
        for (name, dist) in &self.search.space {
            if !TUNABLE.contains(&name.as_str()) {
                bail!("search space names unknown parameter {name:?}");
            }
            dist.validate().with_context(|| format!("search parameter {name}"))?;
        }
        Ok(())
    }

    /// Method and ablation changed, keeping everything else. Method
    /// hyperparameters are reset to the new method's defaults.
    pub fn with_method(&self, method: Method, variant: Variant) -> Self {
        let mut c = self.clone();
        if c.method.name != method || c.method.variant != variant {
            c.method = MethodSpec::new(method, variant);
            c.method.fill_defaults();
        }
        c
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            penalty: self.method.penalty(),
            steps_per_domain: t.steps_per_domain,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            buffer_capacity: t.buffer_capacity,
            hidden: t.hidden.clone(),
            activation: t.activation,
            rff_dim: t.rff_dim,
            train_fraction: t.train_fraction,
            prior_batch_size: t.prior_batch_size,
            standardize: t.standardize,
            anchor: t.anchor,
            optimizer: t.optimizer,
            ablation: t.ablation,
            seed,
        }
    }

    /// Sets one tunable parameter; integer parameters take the floor.
    pub fn set_value(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            bail!("{name} = {value} is not finite");
        }
        let int = || -> Result<usize> {
            if value < 0.0 {
                bail!("{name} = {value} must be >= 0");
            }
            Ok(value.floor() as usize)
        };
        let t = &mut self.training;
        let m = &mut self.method;
        match name {
            "lr" => t.lr = value,
            "batch_size" => t.batch_size = int()?,
            "weight_decay" => t.weight_decay = value,
            "buffer_capacity" => t.buffer_capacity = int()?,
            "steps_per_domain" => t.steps_per_domain = int()?,
            "rff_dim" => t.rff_dim = int()?,
            "prior_batch_size" => t.prior_batch_size = int()?,
            "lambda" => m.lambda = Some(value),
            "beta" => m.beta = Some(value),
            "anneal_iters" => m.anneal_iters = Some(int()?),
            "tau" => m.tau = Some(value),
            "temperature" => m.temperature = Some(value),
            "alpha" => m.alpha = Some(value),
            _ => bail!("unknown parameter {name:?}"),
        }
        Ok(())
    }

    /// Human-readable method name used in reports.
    pub fn method_label(&self) -> String {
        let base = match (self.method.name, self.method.variant) {
            (Method::Erm, _) if self.training.buffer_capacity == 0 => "finetune".to_string(),
            (Method::Erm, _) => "replay-erm".to_string(),
            (m, v) => format!("{v}-{m}"),
        };
        match self.training.ablation {
            Ablation::None => base,
            Ablation::NoAlign => format!("{base}/no-align"),
            Ablation::DynamicAnchors => format!("{base}/dynamic-anchors"),
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring seeds and output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out = None;
        c.method.fill_defaults();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}
