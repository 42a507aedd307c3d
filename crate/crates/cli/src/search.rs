//! Random hyperparameter search and validation-only model selection.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use dicl_core::penalties::{Method, Variant};
use dicl_core::rng::{self, Rng};
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    /// `10^U(low, high)`.
    LogUniform10 { low: f64, high: f64 },
    /// `2^U(low, high)`; integer parameters are floored when applied.
    LogUniform2 { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
    /// Inclusive integer range.
    UniformInt { low: i64, high: i64 },
    Choice { values: Vec<f64> },
    Fixed { value: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Distribution::LogUniform10 { low, high }
            | Distribution::LogUniform2 { low, high }
            | Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Distribution::UniformInt { low, high } => low <= high,
            Distribution::Choice { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
            Distribution::Fixed { value } => value.is_finite(),
        };
        if !ok {
            bail!("invalid distribution {self:?}");
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u = |rng: &mut Rng, a: f64, b: f64| if a == b { a } else { rng.random_range(a..b) };
        match self {
            Distribution::LogUniform10 { low, high } => 10f64.powf(u(rng, *low, *high)),
            Distribution::LogUniform2 { low, high } => 2f64.powf(u(rng, *low, *high)),
            Distribution::Uniform { low, high } => u(rng, *low, *high),
            Distribution::UniformInt { low, high } => rng.random_range(*low..=*high) as f64,
            Distribution::Choice { values } => *values.choose(rng).expect("non-empty choice"),
            Distribution::Fixed { value } => *value,
        }
    }
}

/// Distributions keyed by parameter name, sampled in key order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, Distribution>,
}

impl SearchSpace {
    /// Small-dataset search space for a method.
    pub fn for_method(method: Method, variant: Variant) -> Self {
        use Distribution::*;
        let mut p = BTreeMap::new();
        p.insert("lr".into(), LogUniform10 { low: -4.5, high: -0.5 });
        p.insert("weight_decay".into(), Fixed { value: 0.0 });
        p.insert("batch_size".into(), LogUniform2 { low: 3.0, high: 8.0 });
        p.insert("buffer_capacity".into(), Fixed { value: 1000.0 });
        let tailored = variant == Variant::Tailored;
        match method {
            Method::Erm => {}
            Method::Vrex | Method::Fishr => {
                let (low, high) = if method == Method::Vrex { (-1.0, 5.0) } else { (1.0, 4.0) };
                p.insert("lambda".into(), LogUniform10 { low, high });
                p.insert("anneal_iters".into(), UniformInt { low: 0, high: 1000 });
                if tailored {
                    p.insert("beta".into(), Uniform { low: 1.0, high: 1000.0 });
                }
            }
            Method::Coral | Method::Mmd => {
                p.insert("lambda".into(), LogUniform10 { low: -1.0, high: 1.0 });
                if tailored {
                    p.insert("beta".into(), LogUniform10 { low: -1.0, high: 1.0 });
                }
                if method == Method::Mmd {
                    p.insert("rff_dim".into(), Fixed { value: 128.0 });
                }
            }
            Method::AndMask => {
                p.insert("tau".into(), Uniform { low: 0.5, high: 1.0 });
                if tailored {
                    p.insert("alpha".into(), Uniform { low: 0.1, high: 0.5 });
                }
            }
        }
        SearchSpace { params: p }
    }

    /// Default space for the config's method with the config's own
    /// overrides applied on top. A bufferless config keeps no buffer.
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let mut s = Self::for_method(cfg.method.name, cfg.method.variant);
        if cfg.training.buffer_capacity == 0 {
            s.params.remove("buffer_capacity");
        }
        for (k, d) in &cfg.search.space {
            s.params.insert(k.clone(), d.clone());
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub values: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
}

/// `n_trials` independent draws from `space` applied to `base`.
pub fn random_search(base: &ExperimentConfig, space: &SearchSpace, n_trials: usize, seed: u64) -> Result<Vec<Trial>> {
    for d in space.params.values() {
        d.validate()?;
    }
    let mut rng = rng::stream(seed, rng::STREAM_SEARCH);
    (0..n_trials)
        .map(|index| {
            let mut config = base.clone();
            let mut values = BTreeMap::new();
            for (name, dist) in &space.params {
                let v = dist.sample(&mut rng);
                config.set_value(name, v)?;
                values.insert(name.clone(), v);
            }
            Ok(Trial { index, values, config })
        })
        .collect()
}

/// Mean metrics of one trial over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub index: usize,
    pub source_val_accuracy: f64,
    pub target_accuracy: f64,
}

/// Index of the trial with the highest source validation accuracy, the
/// earliest on ties. Target scores are never read.
pub fn select_best(scores: &[TrialScore]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let v = s.source_val_accuracy;
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetSpec, MethodSpec};

    fn base() -> ExperimentConfig {
        ExperimentConfig::new(
            DatasetSpec::SpuriousBlobs {
                k_sources: 2,
                n_per_domain: 20,
                spurious_strength: 0.9,
                seed: None,
            },
            MethodSpec::new(Method::Vrex, Variant::Tailored),
        )
    }

    #[test]
    fn trials_are_reproducible_and_fixed_values_constant() {
        let b = base();
        let space = SearchSpace::for_config(&b);
        let a = random_search(&b, &space, 20, 3).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, random_search(&b, &space, 20, 3).unwrap());
        assert_ne!(a, random_search(&b, &space, 20, 4).unwrap());
        for t in &a {
            assert_eq!(t.values["weight_decay"], 0.0);
            assert_eq!(t.config.training.buffer_capacity, 1000);
            let bs = t.config.training.batch_size;
            assert!((8..=256).contains(&bs));
            assert_eq!(bs, t.values["batch_size"].floor() as usize);
            assert!((0.1..=1e5).contains(&t.config.method.lambda.unwrap()));
        }
    }

    #[test]
    fn selection_rule() {
        let s = |i, v, t| TrialScore {
            index: i,
            source_val_accuracy: v,
            target_accuracy: t,
        };
        assert_eq!(select_best(&[s(0, 0.5, 0.1)]), Some(0));
        assert_eq!(select_best(&[s(0, 0.7, 0.99), s(1, 0.9, 0.1)]), Some(1));
        assert_eq!(select_best(&[s(0, 0.8, 0.0), s(1, 0.8, 1.0)]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(Distribution::Uniform { low: 2.0, high: 1.0 }.validate().is_err());
        assert!(Distribution::LogUniform10 { low: 0.0, high: f64::INFINITY }.validate().is_err());
        assert!(Distribution::Choice { values: vec![] }.validate().is_err());
    }
}
