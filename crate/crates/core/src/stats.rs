//! Batch invariance statistics, streaming aggregation and the domain priors
//! built from them.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{classifier_grads_var, Tape, Var};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::penalties::Method;
use crate::rng;
use crate::tensor::Tensor;
use crate::DomainId;

/// Streaming mean and sum of squared deviations (Welford / West).
#[derive(Clone, Debug, PartialEq)]
pub struct Welford {
    weight: f64,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford {
            weight: 0.0,
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of updates absorbed.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Total weight absorbed; equals `count` for unweighted use.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "welford of width {} updated with {} values",
                self.dim(),
                v.len()
            )));
        }
        Ok(())
    }

    pub fn update(&mut self, v: &[f64]) -> Result<()> {
        self.check(v)?;
        self.count += 1;
        self.weight += 1.0;
        let n = self.weight;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(v) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
        Ok(())
    }

    pub fn update_weighted(&mut self, v: &[f64], w: f64) -> Result<()> {
        self.check(v)?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("welford weight {w} must be positive")));
        }
        self.count += 1;
        self.weight += w;
        let ratio = w / self.weight;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(v) {
            let delta = x - *m;
            *m += ratio * delta;
            *s += w * delta * (x - *m);
        }
        Ok(())
    }

    /// Combines two aggregates (Chan et al.).
    pub fn merge(&mut self, other: &Welford) -> Result<()> {
        self.check(&other.mean)?;
        if other.weight == 0.0 {
            return Ok(());
        }
        let total = self.weight + other.weight;
        for (j, (m, s)) in self.mean.iter_mut().zip(&mut self.m2).enumerate() {
            let delta = other.mean[j] - *m;
            *m += delta * other.weight / total;
            *s += other.m2[j] + delta * delta * self.weight * other.weight / total;
        }
        self.weight = total;
        self.count += other.count;
        Ok(())
    }

    /// Mean and population variance.
    pub fn finalize(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.count == 0 {
            return Err(Error::EmptyAggregate);
        }
        let var = self.m2.iter().map(|s| s / self.weight).collect();
        Ok((self.mean.clone(), var))
    }

    /// Unbiased variance; needs two unweighted observations.
    pub fn sample_variance(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::VarianceUndefined(self.count as usize));
        }
        Ok(self.m2.iter().map(|s| s / (self.weight - 1.0)).collect())
    }
}

/// Random Fourier features for the RBF kernel `exp(−‖u − u'‖² / (2γ²))`:
/// `z(u) = √(2/D) · cos(u Ω + b)`, `Ω ~ N(0, 1/γ²)`, `b ~ U[0, 2π)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    pub omega: Tensor,
    pub phase: Tensor,
    pub bandwidth: f64,
}

pub const DEFAULT_RFF_DIM: usize = 128;

pub fn make_rff(input_dim: usize, dim: usize, bandwidth: f64, seed: u64) -> Result<RffMap> {
    if dim == 0 || input_dim == 0 {
        return Err(Error::Config("RFF dimensions must be positive".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Config(format!("RFF bandwidth {bandwidth} must be positive")));
    }
    let mut rng = rng::stream(seed, rng::STREAM_RFF);
    let normal = Normal::new(0.0, 1.0 / bandwidth).unwrap();
    let omega = (0..input_dim * dim).map(|_| normal.sample(&mut rng)).collect();
    let phase = (0..dim)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    Ok(RffMap {
        omega: Tensor::from_rows(input_dim, dim, omega)?,
        phase: Tensor::row(phase),
        bandwidth,
    })
}

impl RffMap {
    pub fn dim(&self) -> usize {
        self.omega.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.omega.rows()
    }

    fn scale(&self) -> f64 {
        (2.0 / self.dim() as f64).sqrt()
    }

    pub fn embed(&self, u: &Tensor) -> Tensor {
        let s = self.scale();
        u.matmul(&self.omega).add_row(&self.phase).map(|v| s * v.cos())
    }

    pub fn embed_var<'t>(&self, u: Var<'t>) -> Var<'t> {
        let tape = u.tape();
        u.matmul(tape.constant(self.omega.clone()))
            .add_row(tape.constant(self.phase.clone()))
            .cos()
            .scale(self.scale())
    }
}

/// Median pairwise Euclidean distance between rows; 1 when degenerate.
pub fn median_bandwidth(u: &Tensor) -> f64 {
    let n = u.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = u
                .row_slice(i)
                .iter()
                .zip(u.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(sq.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 1e-12 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// A batch statistic recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum StatVar<'t> {
    Risk(Var<'t>),
    GradVariance(Var<'t>),
    Moments { mean: Var<'t>, cov: Var<'t> },
    Embedding(Var<'t>),
}

impl<'t> StatVar<'t> {
    pub fn kind(&self) -> &'static str {
        match self {
            StatVar::Risk(_) => "risk",
            StatVar::GradVariance(_) => "grad_variance",
            StatVar::Moments { .. } => "moments",
            StatVar::Embedding(_) => "embedding",
        }
    }

    pub fn tape(&self) -> &'t Tape {
        match self {
            StatVar::Risk(v) | StatVar::GradVariance(v) | StatVar::Embedding(v) => v.tape(),
            StatVar::Moments { mean, .. } => mean.tape(),
        }
    }

    /// Detached copy of the values.
    pub fn payload(&self) -> PriorPayload {
        match self {
            StatVar::Risk(v) => PriorPayload::Risk { mean: v.item() },
            StatVar::GradVariance(v) => PriorPayload::GradVariance {
                mean: v.value().into_data(),
            },
            StatVar::Moments { mean, cov } => PriorPayload::Moments {
                mean: mean.value().into_data(),
                cov: cov.value(),
            },
            StatVar::Embedding(v) => PriorPayload::Embedding {
                mean: v.value().into_data(),
            },
        }
    }
}

/// Mean cross-entropy of the batch.
pub fn risk_var<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels)
}

/// Population variance over the batch of per-sample gradients of the loss
/// with respect to the classifier head, as a `[1, H·C + C]` row.
pub fn grad_variance_var<'t>(features: Var<'t>, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let n = logits.rows();
    if n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    let g = classifier_grads_var(features, logits, labels)?;
    let centered = g - g.mean_rows().broadcast_rows(n);
    Ok(centered.square().mean_rows())
}

/// Feature mean `[1, H]` and covariance `[H, H]` with the `n − 1` divisor.
pub fn moments_var(features: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    let mean = features.mean_rows();
    let centered = features - mean.broadcast_rows(n);
    let cov = centered.transpose().matmul(centered).scale(1.0 / (n - 1) as f64);
    Ok((mean, cov))
}

/// Mean RFF embedding `[1, D]` of the features.
pub fn embedding_var<'t>(features: Var<'t>, rff: &RffMap) -> Result<Var<'t>> {
    if features.cols() != rff.input_dim() {
        return Err(Error::Shape(format!(
            "RFF map expects width {}, features have {}",
            rff.input_dim(),
            features.cols()
        )));
    }
    Ok(rff.embed_var(features).mean_rows())
}

/// The method's batch statistic. ANDMask has none.
pub fn method_stat<'t>(
    method: Method,
    features: Var<'t>,
    logits: Var<'t>,
    labels: &[usize],
    rff: Option<&RffMap>,
) -> Result<StatVar<'t>> {
    Ok(match method {
        Method::Vrex => StatVar::Risk(risk_var(logits, labels)?),
        Method::Fishr => StatVar::GradVariance(grad_variance_var(features, logits, labels)?),
        Method::Coral => {
            let (mean, cov) = moments_var(features)?;
            StatVar::Moments { mean, cov }
        }
        Method::Mmd => {
            let rff = rff.ok_or_else(|| Error::Config("MMD statistic needs an RFF map".into()))?;
            StatVar::Embedding(embedding_var(features, rff)?)
        }
        Method::AndMask | Method::Erm => {
            return Err(Error::Config(format!("{method:?} has no batch statistic")))
        }
    })
}

fn forward<'t>(tape: &'t Tape, model: &Model, x: &Tensor) -> Result<(Var<'t>, Var<'t>)> {
    if x.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} for model of width {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let bound = model.bind(tape);
    let f = bound.features(tape.constant(x.clone()));
    Ok((f, bound.classify(f)))
}

pub fn stat_risk(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let (_, logits) = forward(&tape, model, x)?;
    Ok(risk_var(logits, y)?.item())
}

pub fn stat_grad_variance(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let (f, logits) = forward(&tape, model, x)?;
    Ok(grad_variance_var(f, logits, y)?.value().into_data())
}

pub fn stat_feature_moments(model: &Model, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let tape = Tape::new();
    let (f, _) = forward(&tape, model, x)?;
    let (m, c) = moments_var(f)?;
    Ok((m.value().into_data(), c.value()))
}

pub fn stat_rff_embedding(model: &Model, x: &Tensor, rff: &RffMap) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let (f, _) = forward(&tape, model, x)?;
    Ok(embedding_var(f, rff)?.value().into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorPayload {
    Risk { mean: f64 },
    GradVariance { mean: Vec<f64> },
    Moments { mean: Vec<f64>, cov: Tensor },
    Embedding { mean: Vec<f64> },
    /// Mean loss gradient per parameter tensor, in canonical order.
    MeanGradient { grads: Vec<Tensor> },
}

impl PriorPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            PriorPayload::Risk { .. } => "risk",
            PriorPayload::GradVariance { .. } => "grad_variance",
            PriorPayload::Moments { .. } => "moments",
            PriorPayload::Embedding { .. } => "embedding",
            PriorPayload::MeanGradient { .. } => "mean_gradient",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPrior {
    pub domain: DomainId,
    pub method: Method,
    pub payload: PriorPayload,
}

/// Streams `(x, y)` through the model in consecutive chunks of `batch_size`
/// rows and aggregates the method's statistic:
///
/// * risk, feature mean and RFF embedding: Welford over per-sample values;
/// * gradient variance and feature covariance: Welford mean over per-chunk
///   values, skipping chunks with fewer than two rows;
/// * ANDMask: mean loss gradient, chunk means weighted by chunk size.
pub fn compute_domain_prior(
    model: &Model,
    domain: DomainId,
    x: &Tensor,
    y: &[usize],
    method: Method,
    rff: Option<&RffMap>,
    batch_size: usize,
) -> Result<DomainPrior> {
    if batch_size == 0 {
        return Err(Error::Config("prior batch size must be positive".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::Shape(format!("{} rows with {} labels", x.rows(), y.len())));
    }
    let n = y.len();
    let chunks = (0..n).step_by(batch_size).map(|s| (s, (s + batch_size).min(n)));
    let payload = match method {
        Method::Vrex => {
            let mut w = Welford::new(1);
            for (s, e) in chunks {
                let logits = model.predict(&x.slice_rows(s, e))?;
                for l in logits.cross_entropy_rows(&y[s..e]) {
                    w.update(&[l])?;
                }
            }
            PriorPayload::Risk {
                mean: w.finalize()?.0[0],
            }
        }
        Method::Fishr => {
            let mut w = Welford::new(model.num_classes() * (model.latent_dim() + 1));
            for (s, e) in chunks.filter(|(s, e)| e - s >= 2) {
                w.update(&stat_grad_variance(model, &x.slice_rows(s, e), &y[s..e])?)?;
            }
            PriorPayload::GradVariance {
                mean: w.finalize()?.0,
            }
        }
        Method::Coral => {
            let h = model.latent_dim();
            let mut mean = Welford::new(h);
            let mut cov = Welford::new(h * h);
            for (s, e) in chunks {
                let xb = x.slice_rows(s, e);
                let f = model.features(&xb)?;
                for i in 0..f.rows() {
                    mean.update(f.row_slice(i))?;
                }
                if e - s >= 2 {
                    cov.update(stat_feature_moments(model, &xb)?.1.data())?;
                }
            }
            PriorPayload::Moments {
                mean: mean.finalize()?.0,
                cov: Tensor::from_rows(h, h, cov.finalize()?.0)?,
            }
        }
        Method::Mmd => {
            let rff = rff.ok_or_else(|| Error::Config("MMD prior needs an RFF map".into()))?;
            let mut w = Welford::new(rff.dim());
            for (s, e) in chunks {
                let z = rff.embed(&model.features(&x.slice_rows(s, e))?);
                for i in 0..z.rows() {
                    w.update(z.row_slice(i))?;
                }
            }
            PriorPayload::Embedding {
                mean: w.finalize()?.0,
            }
        }
        Method::AndMask => {
            let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| (p.rows(), p.cols())).collect();
            let mut w = Welford::new(shapes.iter().map(|(r, c)| r * c).sum());
            for (s, e) in chunks {
                let flat: Vec<f64> = mean_loss_grads(model, &x.slice_rows(s, e), &y[s..e])?
                    .into_iter()
                    .flat_map(Tensor::into_data)
                    .collect();
                w.update_weighted(&flat, (e - s) as f64)?;
            }
            let flat = w.finalize()?.0;
            let mut grads = Vec::with_capacity(shapes.len());
            let mut off = 0;
            for (r, c) in shapes {
                grads.push(Tensor::from_rows(r, c, flat[off..off + r * c].to_vec())?);
                off += r * c;
            }
            PriorPayload::MeanGradient { grads }
        }
        Method::Erm => return Err(Error::Config("ERM keeps no domain prior".into())),
    };
    Ok(DomainPrior {
        domain,
        method,
        payload,
    })
}

/// Convenience wrapper over a whole [`Domain`].
pub fn domain_prior(model: &Model, domain: &Domain, method: Method, rff: Option<&RffMap>, batch_size: usize) -> Result<DomainPrior> {
    compute_domain_prior(model, domain.id, &domain.inputs, &domain.labels, method, rff, batch_size)
}

/// Gradient of the mean cross-entropy over `(x, y)` for every parameter.
pub fn mean_loss_grads(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let logits = bound.classify(bound.features(tape.constant(x.clone())));
    let loss = logits.cross_entropy(y)?;
    Ok(bound.grads(&tape.backward(loss)?))
}
