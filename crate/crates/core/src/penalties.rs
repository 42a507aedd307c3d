//! Invariance penalties: prior matching for the naive family, within-update
//! dispersion across replayed domains, alignment to stored anchors, and the
//! sign-agreement masks used by ANDMask.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::stats::{DomainPrior, PriorPayload, StatVar};
use crate::tensor::{dot, norm_sq, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// No invariance term: plain finetuning, or replay-ERM with a buffer.
    Erm,
    Vrex,
    Fishr,
    Coral,
    Mmd,
    #[serde(rename = "andmask")]
    AndMask,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Erm,
        Method::Vrex,
        Method::Fishr,
        Method::Coral,
        Method::Mmd,
        Method::AndMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Vrex => "vrex",
            Method::Fishr => "fishr",
            Method::Coral => "coral",
            Method::Mmd => "mmd",
            Method::AndMask => "andmask",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    Tailored,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Naive => "naive",
            Variant::Tailored => "tailored",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(Variant::Naive),
            "tailored" => Ok(Variant::Tailored),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub method: Method,
    pub variant: Variant,
    /// Invariance weight.
    pub lambda: f64,
    /// Alignment weight for every method but ANDMask.
    pub beta: f64,
    /// Steps (global) during which the invariance weight is held at 1.
    pub anneal_iters: usize,
    /// Sign-agreement threshold.
    pub tau: f64,
    /// Soft-mask temperature.
    pub temperature: f64,
    /// ANDMask logit-anchoring weight.
    pub alpha: f64,
    /// Added inside the log of gradient variances.
    pub log_eps: f64,
    /// Added to the mask density in the masked update.
    pub mask_eps: f64,
    pub kd_projection: bool,
    pub adaptive_tau: bool,
}

impl PenaltyConfig {
    /// Default values for small datasets.
    pub fn defaults(method: Method, variant: Variant) -> Self {
        let (lambda, anneal_iters) = match method {
            Method::Vrex => (10.0, 100),
            Method::Fishr => (1000.0, 100),
            Method::Coral | Method::Mmd => (1.0, 0),
            Method::Erm | Method::AndMask => (0.0, 0),
        };
        let beta = match (method, variant) {
            (Method::Erm | Method::AndMask, _) | (_, Variant::Naive) => 0.0,
            _ => 1.0,
        };
        PenaltyConfig {
            method,
            variant,
            lambda,
            beta,
            anneal_iters,
            tau: 1.0,
            temperature: 0.1,
            alpha: if method == Method::AndMask && variant == Variant::Tailored {
                0.1
            } else {
                0.0
            },
            log_eps: 1e-8,
            mask_eps: 1e-12,
            kd_projection: true,
            adaptive_tau: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be finite and >= 0")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta must be finite and >= 0")?;
        check(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be finite and >= 0")?;
        check((0.0..=1.0).contains(&self.tau), "tau must lie in [0, 1]")?;
        check(self.temperature > 0.0 && self.temperature.is_finite(), "temperature must be > 0")?;
        check(self.log_eps > 0.0, "log_eps must be > 0")?;
        check(self.mask_eps > 0.0, "mask_eps must be > 0")
    }
}

fn zero<'t>(like: &StatVar<'t>) -> Var<'t> {
    like.tape().constant(Tensor::scalar(0.0))
}

fn sum_vars<'t>(vars: impl IntoIterator<Item = Var<'t>>) -> Option<Var<'t>> {
    vars.into_iter().reduce(|a, b| a + b)
}

fn sq_diff_to<'t>(v: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    if v.with_value(|t| t.len()) != target.len() {
        return Err(Error::Shape(format!(
            "statistic of {} values against prior of {}",
            v.with_value(|t| t.len()),
            target.len()
        )));
    }
    let c = v.tape().constant(Tensor::new(v.shape(), target.to_vec())?);
    Ok((v - c).sq_norm())
}

/// Method-specific distance between a batch statistic and a stored prior:
/// squared difference (risk), squared ℓ2 (gradient variance, embedding),
/// squared ℓ2 plus squared Frobenius (moments).
pub fn prior_distance<'t>(stat: &StatVar<'t>, prior: &PriorPayload) -> Result<Var<'t>> {
    match (stat, prior) {
        (StatVar::Risk(r), PriorPayload::Risk { mean }) => sq_diff_to(*r, &[*mean]),
        (StatVar::GradVariance(v), PriorPayload::GradVariance { mean }) => sq_diff_to(*v, mean),
        (StatVar::Embedding(v), PriorPayload::Embedding { mean }) => sq_diff_to(*v, mean),
        (StatVar::Moments { mean, cov }, PriorPayload::Moments { mean: pm, cov: pc }) => {
            Ok(sq_diff_to(*mean, pm)? + sq_diff_to(*cov, pc.data())?)
        }
        _ => Err(Error::MethodMismatch {
            stat: stat.kind(),
            prior: prior.kind(),
        }),
    }
}

/// Mean distance from the current statistic to every stored prior; 0 when
/// there are none.
pub fn naive_penalty<'t>(current: &StatVar<'t>, priors: &[&DomainPrior]) -> Result<Var<'t>> {
    let terms = priors
        .iter()
        .map(|p| prior_distance(current, &p.payload))
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len();
    Ok(match sum_vars(terms) {
        Some(total) => total.scale(1.0 / n as f64),
        None => zero(current),
    })
}

/// Mean squared deviation of each domain's statistic from the across-domain
/// mean, within one update. A single domain gives 0.
pub fn replay_penalty<'t>(stats: &[StatVar<'t>]) -> Result<Var<'t>> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Config("replay penalty needs at least one domain".into()))?;
    if let Some(bad) = stats.iter().find(|s| s.kind() != first.kind()) {
        return Err(Error::MethodMismatch {
            stat: bad.kind(),
            prior: first.kind(),
        });
    }
    let s = stats.len() as f64;
    // Σ_e ‖x_e − x̄‖² written as (1/s)·Σ_{e<e'} ‖x_e − x_e'‖², which is exactly
    // zero when all statistics coincide.
    let spread = |vars: Vec<Var<'t>>| -> Var<'t> {
        let pairs = (0..vars.len()).flat_map(|a| (a + 1..vars.len()).map(move |b| (a, b)));
        let mut terms = pairs.map(|(a, b)| (vars[a] - vars[b]).sq_norm()).peekable();
        if terms.peek().is_none() {
            return (vars[0] - vars[0]).sq_norm();
        }
        sum_vars(terms).unwrap().scale(1.0 / s)
    };
    let total = match first {
        StatVar::Risk(_) | StatVar::GradVariance(_) | StatVar::Embedding(_) => spread(
            stats
                .iter()
                .map(|st| match st {
                    StatVar::Risk(v) | StatVar::GradVariance(v) | StatVar::Embedding(v) => *v,
                    StatVar::Moments { .. } => unreachable!(),
                })
                .collect(),
        ),
        StatVar::Moments { .. } => {
            let (means, covs): (Vec<_>, Vec<_>) = stats
                .iter()
                .map(|st| match st {
                    StatVar::Moments { mean, cov } => (*mean, *cov),
                    _ => unreachable!(),
                })
                .unzip();
            spread(means) + spread(covs)
        }
    };
    Ok(total.scale(1.0 / s))
}

/// `E_i ‖current_i − stored_i‖²` over the rows of a replay batch.
pub fn logit_anchor_loss<'t>(current: Var<'t>, stored: &Tensor) -> Result<Var<'t>> {
    if current.shape() != stored.shape() {
        return Err(Error::Shape(format!(
            "anchored logits {:?} against stored {:?}",
            current.shape(),
            stored.shape()
        )));
    }
    let n = current.rows().max(1) as f64;
    let c = current.tape().constant(stored.clone());
    Ok((current - c).sq_norm().scale(1.0 / n))
}

fn unit_log(v: &[f64], eps: f64) -> Vec<f64> {
    let l: Vec<f64> = v.iter().map(|x| (x + eps).ln()).collect();
    let n = norm_sq(&l).sqrt();
    l.iter().map(|x| x / n).collect()
}

/// `1 − cos(normalize(log(v̂ + ε)), normalize(log(v̄ + ε)))`, evaluated as
/// half the squared distance between the two unit vectors.
pub fn log_variance_cosine<'t>(current: Var<'t>, prior: &[f64], eps: f64) -> Result<Var<'t>> {
    let p = current.with_value(|t| t.len());
    if p != prior.len() {
        return Err(Error::Shape(format!("{p} variances against prior of {}", prior.len())));
    }
    let a = current.add_scalar(eps).ln();
    let shape = a.shape();
    let unit = a.div(a.sq_norm().sqrt().broadcast_scalar(shape[0], shape[1]));
    let anchor = current.tape().constant(Tensor::new(shape, unit_log(prior, eps))?);
    Ok((unit - anchor).sq_norm().scale(0.5))
}

/// One replayed domain's contribution to the alignment loss.
pub enum AlignTerm<'a, 't> {
    /// Current logits of replayed samples against their stored logits.
    Logits { current: Var<'t>, stored: &'a Tensor },
    /// Batch statistic of a replayed domain against that domain's prior.
    Prior { stat: StatVar<'t>, prior: &'a DomainPrior },
}

/// Sum over replayed domains of the method's alignment term: logit anchoring
/// for VREX and ANDMask, log-variance cosine for Fishr, prior distance for
/// CORAL and MMD. `None` when there is nothing to align.
pub fn alignment_loss<'t>(method: Method, terms: &[AlignTerm<'_, 't>], log_eps: f64) -> Result<Option<Var<'t>>> {
    let mut parts = Vec::with_capacity(terms.len());
    for term in terms {
        parts.push(match (method, term) {
            (Method::Vrex | Method::AndMask, AlignTerm::Logits { current, stored }) => {
                logit_anchor_loss(*current, stored)?
            }
            (Method::Fishr, AlignTerm::Prior { stat: StatVar::GradVariance(v), prior }) => match &prior.payload {
                PriorPayload::GradVariance { mean } => log_variance_cosine(*v, mean, log_eps)?,
                other => {
                    return Err(Error::MethodMismatch {
                        stat: "grad_variance",
                        prior: other.kind(),
                    })
                }
            },
            (Method::Coral | Method::Mmd, AlignTerm::Prior { stat, prior }) => prior_distance(stat, &prior.payload)?,
            _ => {
                return Err(Error::Config(format!(
                    "alignment term does not fit method {method}"
                )))
            }
        });
    }
    Ok(sum_vars(parts))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|mean_e sign(g_e)|` per coordinate.
pub fn sign_agreement(grads: &[&[f64]]) -> Result<Vec<f64>> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Config("sign agreement over zero gradients".into()))?;
    if grads.iter().any(|g| g.len() != first.len()) {
        return Err(Error::Shape("gradients of different lengths".into()));
    }
    let s = grads.len() as f64;
    Ok((0..first.len())
        .map(|j| (grads.iter().map(|g| sign(g[j])).sum::<f64>() / s).abs())
        .collect())
}

/// Binary mask keeping coordinates whose sign agreement across the current
/// gradient and the stored mean gradients reaches `tau`.
pub fn andmask_hard_mask(current: &[f64], stored: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    let mut all = Vec::with_capacity(stored.len() + 1);
    all.push(current);
    all.extend_from_slice(stored);
    Ok(sign_agreement(&all)?
        .into_iter()
        .map(|a| if a >= tau { 1.0 } else { 0.0 })
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ((agreement − τ) / T)` per coordinate.
pub fn andmask_soft_mask(grads: &[&[f64]], tau: f64, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("mask temperature {temperature} must be > 0")));
    }
    Ok(sign_agreement(grads)?
        .into_iter()
        .map(|a| sigmoid((a - tau) / temperature))
        .collect())
}

/// `m ⊙ mean_e(g_e) / (mean(m) + ε)`.
pub fn andmask_apply(mask: &[f64], grads: &[&[f64]], eps: f64) -> Result<Vec<f64>> {
    if grads.is_empty() || grads.iter().any(|g| g.len() != mask.len()) {
        return Err(Error::Shape("mask and gradients differ in length".into()));
    }
    let s = grads.len() as f64;
    let density = mask.iter().sum::<f64>() / mask.len().max(1) as f64;
    let denom = density + eps;
    Ok((0..mask.len())
        .map(|j| mask[j] * (grads.iter().map(|g| g[j]).sum::<f64>() / s) / denom)
        .collect())
}

/// Removes the component of `g_kd` that opposes `g_avg`. Leaves `g_kd`
/// unchanged when they do not conflict or `g_avg` is zero.
pub fn kd_conflict_projection(g_kd: &[f64], g_avg: &[f64]) -> Result<Vec<f64>> {
    if g_kd.len() != g_avg.len() {
        return Err(Error::Shape("projection of vectors of different lengths".into()));
    }
    let inner = dot(g_kd, g_avg);
    let nn = norm_sq(g_avg);
    if inner >= 0.0 || nn == 0.0 {
        return Ok(g_kd.to_vec());
    }
    let c = inner / nn;
    Ok(g_kd.iter().zip(g_avg).map(|(k, a)| k - c * a).collect())
}

/// Threshold update after a step with the given mean mask density.
pub fn adapt_tau(tau: f64, density: f64) -> f64 {
    if density < 0.05 {
        (tau - 0.05).max(0.5)
    } else if density > 0.95 {
        (tau + 0.05).min(1.0)
    } else {
        tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn risk_prior(r: f64) -> DomainPrior {
        DomainPrior {
            domain: 1,
            method: Method::Vrex,
            payload: PriorPayload::Risk { mean: r },
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("irm".parse::<Method>().is_err());
        assert_eq!("Naive".parse::<Variant>().unwrap(), Variant::Naive);
    }

    #[test]
    fn config_bounds() {
        let mut c = PenaltyConfig::defaults(Method::Fishr, Variant::Tailored);
        assert_eq!((c.lambda, c.anneal_iters, c.beta), (1000.0, 100, 1.0));
        c.validate().unwrap();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let a = PenaltyConfig::defaults(Method::AndMask, Variant::Tailored);
        assert_eq!((a.tau, a.alpha), (1.0, 0.1));
    }

    #[test]
    fn naive_penalty_cases() {
        let tape = Tape::new();
        let r = StatVar::Risk(tape.constant(Tensor::scalar(0.0)));
        assert_eq!(naive_penalty(&r, &[]).unwrap().item(), 0.0);
        let (a, b) = (risk_prior(1.0), risk_prior(3.0));
        assert_eq!(naive_penalty(&r, &[&a, &b]).unwrap().item(), 5.0);
        let g = DomainPrior {
            domain: 1,
            method: Method::Fishr,
            payload: PriorPayload::GradVariance { mean: vec![0.0] },
        };
        assert!(matches!(naive_penalty(&r, &[&g]), Err(Error::MethodMismatch { .. })));
    }

    #[test]
    fn coral_penalty_vanishes_on_match() {
        let tape = Tape::new();
        let mean = Tensor::row(vec![1.0, -2.0]);
        let cov = Tensor::from_rows(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let stat = StatVar::Moments {
            mean: tape.constant(mean.clone()),
            cov: tape.constant(cov.clone()),
        };
        let prior = DomainPrior {
            domain: 1,
            method: Method::Coral,
            payload: PriorPayload::Moments {
                mean: mean.into_data(),
                cov,
            },
        };
        assert_eq!(naive_penalty(&stat, &[&prior, &prior]).unwrap().item(), 0.0);
    }

    #[test]
    fn replay_penalty_two_risks() {
        let tape = Tape::new();
        let stats = [0.0, 2.0].map(|r| StatVar::Risk(tape.constant(Tensor::scalar(r))));
        assert_eq!(replay_penalty(&stats).unwrap().item(), 1.0);
        assert_eq!(replay_penalty(&stats[..1]).unwrap().item(), 0.0);
        let same = [0.7; 3].map(|r| StatVar::Risk(tape.constant(Tensor::scalar(r))));
        assert_eq!(replay_penalty(&same).unwrap().item(), 0.0);
    }

    #[test]
    fn alignment_zero_at_anchor() {
        let tape = Tape::new();
        let z = Tensor::from_rows(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let term = AlignTerm::Logits {
            current: tape.constant(z.clone()),
            stored: &z,
        };
        assert_eq!(alignment_loss(Method::AndMask, &[term], 1e-8).unwrap().unwrap().item(), 0.0);

        let v = vec![0.3, 0.01, 2.0];
        let prior = DomainPrior {
            domain: 2,
            method: Method::Fishr,
            payload: PriorPayload::GradVariance { mean: v.clone() },
        };
        let stat = StatVar::GradVariance(tape.constant(Tensor::row(v)));
        let loss = alignment_loss(Method::Fishr, &[AlignTerm::Prior { stat, prior: &prior }], 1e-8)
            .unwrap()
            .unwrap()
            .item();
        assert_eq!(loss, 0.0);
        assert!(alignment_loss(Method::Coral, &[], 1e-8).unwrap().is_none());
    }

    #[test]
    fn log_variance_distance_ignores_powers_but_not_scale() {
        let prior = [0.3, 0.01, 2.0];
        let dist = |v: Vec<f64>| {
            let tape = Tape::new();
            log_variance_cosine(tape.constant(Tensor::row(v)), &prior, 1e-30).unwrap().item()
        };
        assert!(dist(prior.iter().map(|v| v.powf(2.5)).collect()) < 1e-15);
        assert!(dist(prior.iter().map(|v| 10.0 * v).collect()) > 1e-3);
    }

    #[test]
    fn alignment_rejects_wrong_term() {
        let tape = Tape::new();
        let z = Tensor::zeros(1, 2);
        let term = AlignTerm::Logits {
            current: tape.constant(z.clone()),
            stored: &z,
        };
        assert!(alignment_loss(Method::Coral, &[term], 1e-8).is_err());
    }

    #[test]
    fn hard_mask_small_cases() {
        assert_eq!(andmask_hard_mask(&[1.0], &[&[2.0]], 1.0).unwrap(), [1.0]);
        assert_eq!(andmask_hard_mask(&[1.0], &[&[-2.0]], 0.1).unwrap(), [0.0]);
    }

    #[test]
    fn soft_mask_values() {
        let m = andmask_soft_mask(&[&[1.0, 1.0], &[1.0, -1.0]], 0.5, 0.1).unwrap();
        assert!((m[0] - 1.0 / (1.0 + (-5.0f64).exp())).abs() < 1e-15);
        assert!((m[0] - 0.9933).abs() < 1e-4);
        let half = andmask_soft_mask(&[&[1.0], &[1.0], &[-1.0], &[1.0]], 0.5, 0.3).unwrap();
        assert_eq!(half, [0.5]);
        assert!(andmask_soft_mask(&[&[1.0]], 0.5, 0.0).is_err());
    }

    #[test]
    fn apply_cases() {
        let g = andmask_apply(&[1.0, 0.0], &[&[2.0, 4.0]], 1e-300).unwrap();
        assert_eq!(g, [4.0, 0.0]);
        let g = andmask_apply(&[0.0, 0.0], &[&[2.0, 4.0]], 1e-12).unwrap();
        assert_eq!(g, [0.0, 0.0]);
        let g = andmask_apply(&[1.0, 1.0], &[&[1.0, 3.0], &[3.0, 5.0]], 1e-12).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-10 && (g[1] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn projection_cases() {
        assert_eq!(kd_conflict_projection(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), [1.0, 0.0]);
        assert_eq!(kd_conflict_projection(&[-1.0, -2.0], &[1.0, 2.0]).unwrap(), [0.0, 0.0]);
        assert_eq!(kd_conflict_projection(&[-1.0, 3.0], &[0.0, 0.0]).unwrap(), [-1.0, 3.0]);
    }

    #[test]
    fn tau_adaptation() {
        assert_eq!(adapt_tau(0.52, 0.01), 0.5);
        assert_eq!(adapt_tau(0.8, 0.01), 0.75);
        assert_eq!(adapt_tau(0.98, 0.99), 1.0);
        assert_eq!(adapt_tau(0.7, 0.5), 0.7);
    }
}
