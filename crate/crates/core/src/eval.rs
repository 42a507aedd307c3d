//! Evaluation metrics: accuracy, macro F1, backwards transfer and rank
//! aggregation across datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Argmax predictions, ties to the lowest class.
pub fn predict_classes(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    Ok(model.predict(x)?.argmax_rows())
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "accuracy over {} logit rows and {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    accuracy_from_logits(&model.predict(x)?, labels)
}

/// Unweighted mean of per-class F1. A class that never occurs in either
/// predictions or labels scores 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if predictions.len() != labels.len() || classes == 0 {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels over {classes} classes",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Label {
                label: p.max(y),
                classes,
            });
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

/// Lower-triangular matrix: row `i` holds accuracies on the validation
/// splits of sources `0..=i` after training source `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Shape(format!(
                "row {} of the accuracy matrix has {} entries",
                self.rows.len(),
                row.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean over earlier domains of final minus just-trained accuracy.
    /// Negative values mean forgetting. `None` with fewer than two rows.
    pub fn bwt(&self) -> Option<f64> {
        let k = self.rows.len();
        if k < 2 {
            return None;
        }
        let last = &self.rows[k - 1];
        let sum: f64 = (0..k - 1).map(|j| last[j] - self.rows[j][j]).sum();
        Some(sum / (k - 1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub arith_mean: f64,
    pub geom_mean: f64,
    pub median: f64,
    pub ranks: Vec<f64>,
}

/// Ranks of `scores` with 1 for the highest; ties share the average rank.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// `scores[method][d]` is the method's score on dataset `d`; higher is
/// better. Every method must cover the same datasets.
pub fn rank_table(scores: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, RankSummary>> {
    let datasets = scores.values().next().map_or(0, Vec::len);
    if datasets == 0 || scores.values().any(|s| s.len() != datasets) {
        return Err(Error::Data("rank table needs equal, non-zero dataset counts".into()));
    }
    let methods: Vec<&String> = scores.keys().collect();
    let mut per_method: Vec<Vec<f64>> = vec![Vec::with_capacity(datasets); methods.len()];
    for d in 0..datasets {
        let column: Vec<f64> = methods.iter().map(|m| scores[*m][d]).collect();
        for (i, r) in average_ranks(&column).into_iter().enumerate() {
            per_method[i].push(r);
        }
    }
    Ok(methods
        .into_iter()
        .zip(per_method)
        .map(|(m, ranks)| {
            let n = ranks.len() as f64;
            let arith_mean = ranks.iter().sum::<f64>() / n;
            let geom_mean = (ranks.iter().map(|r| r.ln()).sum::<f64>() / n).exp();
            let mut sorted = ranks.clone();
            sorted.sort_by(f64::total_cmp);
            let k = sorted.len();
            let median = if k % 2 == 1 {
                sorted[k / 2]
            } else {
                0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
            };
            (
                m.clone(),
                RankSummary {
                    arith_mean,
                    geom_mean,
                    median,
                    ranks,
                },
            )
        })
        .collect())
}
