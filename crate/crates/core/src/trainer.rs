//! Sequential training over a stream of source domains with replay,
//! invariance penalties, alignment to stored priors and masked updates.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::buffer::MemoryBuffer;
use crate::data::{split_train_val, Domain, DomainStream};
use crate::error::{Error, Result};
use crate::eval::{accuracy, macro_f1, predict_classes, AccuracyMatrix};
use crate::model::{Activation, Model, ModelSnapshot};
use crate::penalties::{
    adapt_tau, alignment_loss, andmask_apply, andmask_hard_mask, andmask_soft_mask, kd_conflict_projection,
    naive_penalty, replay_penalty, AlignTerm, Method, PenaltyConfig, Variant,
};
use crate::rng::{self, Rng};
use crate::stats::{domain_prior, make_rff, median_bandwidth, method_stat, DomainPrior, PriorPayload, RffMap, StatVar};
use crate::tensor::Tensor;
use crate::DomainId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Alignment weight forced to zero.
    NoAlign,
    /// Earlier priors and stored `z` recomputed from the buffer at the end
    /// of every domain.
    DynamicAnchors,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-align" => Ok(Ablation::NoAlign),
            "dynamic-anchors" => Ok(Ablation::DynamicAnchors),
            _ => Err(Error::Config(format!("unknown ablation {s:?}"))),
        }
    }
}

/// What is stored as `z` alongside replayed samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    #[default]
    Logits,
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub penalty: PenaltyConfig,
    pub steps_per_domain: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub rff_dim: usize,
    /// Share of each source kept for training; the rest is validation.
    pub train_fraction: f64,
    /// Chunk size used when computing end-of-domain priors.
    pub prior_batch_size: usize,
    pub standardize: bool,
    pub anchor: AnchorKind,
    pub optimizer: Optimizer,
    pub ablation: Ablation,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, variant: Variant) -> Self {
        TrainConfig {
            penalty: PenaltyConfig::defaults(method, variant),
            steps_per_domain: 200,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            buffer_capacity: 1000,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            rff_dim: crate::stats::DEFAULT_RFF_DIM,
            train_fraction: 0.8,
            prior_batch_size: 64,
            standardize: true,
            anchor: AnchorKind::Logits,
            optimizer: Optimizer::Adam,
            ablation: Ablation::None,
            seed: 0,
        }
    }

    pub fn method(&self) -> Method {
        self.penalty.method
    }

    /// Whether training batches include replayed samples.
    pub fn uses_replay(&self) -> bool {
        self.buffer_capacity > 0 && (self.penalty.method == Method::Erm || self.penalty.variant == Variant::Tailored)
    }

    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps_per_domain == 0 {
            return fail("steps_per_domain must be positive");
        }
        if self.batch_size == 0 || self.prior_batch_size == 0 {
            return fail("batch sizes must be positive");
        }
        if matches!(self.method(), Method::Fishr | Method::Coral) && self.batch_size < 2 {
            return fail("variance statistics need batch_size >= 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be finite and >= 0");
        }
        if self.rff_dim == 0 {
            return fail("rff_dim must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)");
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        Ok(())
    }

    fn align_weight(&self) -> f64 {
        if self.ablation == Ablation::NoAlign {
            return 0.0;
        }
        match self.method() {
            Method::AndMask => self.penalty.alpha,
            _ => self.penalty.beta,
        }
    }
}

/// Invariance weight at a global step: 1 while `step < anneal_iters`,
/// `lambda` afterwards.
pub fn anneal_weight(step: usize, anneal_iters: usize, lambda: f64) -> f64 {
    if step < anneal_iters {
        1.0
    } else {
        lambda
    }
}

/// `p ← p − lr·(g + wd·p)` for every tensor.
pub fn optimizer_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters with {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * (d + weight_decay * *v);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// Adam moment estimates (β1 = 0.9, β2 = 0.999, ε = 1e-8). Weight decay is
/// added to the gradient as in SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters with {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - Self::B1.powf(self.t as f64);
        let c2 = 1.0 - Self::B2.powf(self.t as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[k].len() != g.len() {
                return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = d + weight_decay * *w;
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * d;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * d * d;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
        Ok(())
    }
}

/// Row indices of a minibatch of `b` rows from `n`: a uniform subset when
/// `n >= b`, uniform draws with replacement otherwise.
pub fn sample_indices(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    if n >= b {
        index::sample(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

/// One domain's slice of a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBatch {
    pub domain: DomainId,
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Stored `z` of replayed samples; `None` for the current domain.
    pub z: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub domain: DomainId,
    pub erm: f64,
    pub penalty: f64,
    pub alignment: f64,
    pub lambda_eff: f64,
    pub align_weight: f64,
    pub total: f64,
    pub mask_density: Option<f64>,
    pub tau: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub buffer: MemoryBuffer,
    pub priors: BTreeMap<DomainId, DomainPrior>,
    pub snapshots: BTreeMap<DomainId, ModelSnapshot>,
    pub rff: Option<RffMap>,
    pub step: usize,
    pub tau: f64,
    pub logs: Vec<StepLog>,
    domains_seen: usize,
    adam: AdamState,
    batch_rng: Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(config.seed, rng::STREAM_INIT);
        let model = Model::new(input_dim, &config.hidden, classes, config.activation, &mut init)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Self {
        let capacity = if config.uses_replay() { config.buffer_capacity } else { 0 };
        Trainer {
            buffer: MemoryBuffer::new(capacity, config.seed),
            batch_rng: rng::stream(config.seed, rng::STREAM_BATCH),
            tau: config.penalty.tau,
            model,
            priors: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            rff: None,
            step: 0,
            logs: Vec::new(),
            domains_seen: 0,
            adam: AdamState::default(),
            config,
        }
    }

    /// A current-domain batch of size B, then one replay batch of size B per
    /// non-empty earlier partition in ascending domain order.
    pub fn compose_batch(&mut self, domain: &Domain) -> Result<Vec<SubBatch>> {
        let b = self.config.batch_size;
        let idx = sample_indices(&mut self.batch_rng, domain.len(), b);
        let (x, y) = domain.subset(&idx);
        let mut out = vec![SubBatch {
            domain: domain.id,
            x,
            y,
            z: None,
        }];
        if self.config.uses_replay() {
            for d in self.buffer.domains() {
                if d == domain.id {
                    continue;
                }
                let r = self.buffer.sample_batch(d, b, &mut self.batch_rng)?;
                out.push(SubBatch {
                    domain: d,
                    x: r.x,
                    y: r.y,
                    z: Some(r.z),
                });
            }
        }
        Ok(out)
    }

    fn ensure_rff(&mut self, x: &Tensor) -> Result<()> {
        if self.config.method() == Method::Mmd && self.rff.is_none() {
            let f = self.model.features(x)?;
            let gamma = median_bandwidth(&f);
            self.rff = Some(make_rff(f.cols(), self.config.rff_dim, gamma, self.config.seed)?);
        }
        Ok(())
    }

    /// One parameter update from the given sub-batches (the first is the
    /// current domain).
    pub fn train_step(&mut self, subs: &[SubBatch]) -> Result<StepLog> {
        let current = subs
            .first()
            .ok_or_else(|| Error::Config("train step without batches".into()))?;
        self.ensure_rff(&current.x)?;
        let (log, grads) = if self.config.method() == Method::AndMask {
            self.andmask_grads(subs)?
        } else {
            self.loss_grads(subs)?
        };
        if !log.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                step: log.step,
                reason: format!("non-finite loss or gradient; step log: {log:?}"),
            });
        }
        let (lr, wd) = (self.config.lr, self.config.weight_decay);
        match self.config.optimizer {
            Optimizer::Sgd => optimizer_step(&mut self.model.params_mut(), &grads, lr, wd)?,
            Optimizer::Adam => self.adam.step(&mut self.model.params_mut(), &grads, lr, wd)?,
        }
        self.step += 1;
        self.logs.push(log.clone());
        Ok(log)
    }

    fn loss_grads(&self, subs: &[SubBatch]) -> Result<(StepLog, Vec<Tensor>)> {
        let cfg = &self.config;
        let method = cfg.method();
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let parts: Vec<&Tensor> = subs.iter().map(|s| &s.x).collect();
        let x_all = if parts.len() == 1 {
            parts[0].clone()
        } else {
            Tensor::vstack(&parts)?
        };
        let y_all: Vec<usize> = subs.iter().flat_map(|s| s.y.iter().copied()).collect();
        let f_all = bound.features(tape.constant(x_all));
        let logits_all = bound.classify(f_all);
        let erm = logits_all.cross_entropy(&y_all)?;

        let mut slices = Vec::with_capacity(subs.len());
        let mut start = 0;
        for s in subs {
            let end = start + s.y.len();
            if subs.len() == 1 {
                slices.push((f_all, logits_all));
            } else {
                slices.push((f_all.slice_rows(start, end), logits_all.slice_rows(start, end)));
            }
            start = end;
        }

        let lambda_eff = match method {
            Method::Erm => 0.0,
            _ => anneal_weight(self.step, cfg.penalty.anneal_iters, cfg.penalty.lambda),
        };
        let align_weight = match (method, cfg.penalty.variant) {
            (Method::Erm, _) | (_, Variant::Naive) => 0.0,
            _ => cfg.align_weight(),
        };
        let rff = self.rff.as_ref();
        let stat = |i: usize| -> Result<StatVar<'_>> {
            let (f, l) = slices[i];
            method_stat(method, f, l, &subs[i].y, rff)
        };

        let mut loss = erm;
        let mut penalty_value = 0.0;
        let mut align_value = 0.0;
        if lambda_eff != 0.0 {
            let penalty = match cfg.penalty.variant {
                Variant::Tailored => {
                    let stats = (0..subs.len()).map(stat).collect::<Result<Vec<_>>>()?;
                    replay_penalty(&stats)?
                }
                Variant::Naive => {
                    let priors: Vec<&DomainPrior> = self.priors.values().collect();
                    naive_penalty(&stat(0)?, &priors)?
                }
            };
            penalty_value = penalty.item();
            loss = loss + penalty.scale(lambda_eff);
        }
        if align_weight != 0.0 && subs.len() > 1 {
            let mut stats = Vec::new();
            for i in 1..subs.len() {
                stats.push(match method {
                    Method::Vrex => None,
                    _ => Some(stat(i)?),
                });
            }
            let mut terms = Vec::with_capacity(stats.len());
            for (k, st) in stats.into_iter().enumerate() {
                let sub = &subs[k + 1];
                terms.push(match st {
                    None => AlignTerm::Logits {
                        current: slices[k + 1].1,
                        stored: sub.z.as_ref().expect("replayed batch carries z"),
                    },
                    Some(stat) => AlignTerm::Prior {
                        stat,
                        prior: self
                            .priors
                            .get(&sub.domain)
                            .ok_or_else(|| Error::Config(format!("no prior stored for replayed domain {}", sub.domain)))?,
                    },
                });
            }
            if let Some(align) = alignment_loss(method, &terms, cfg.penalty.log_eps)? {
                align_value = align.item();
                loss = loss + align.scale(align_weight);
            }
        }
        let log = StepLog {
            step: self.step,
            domain: subs[0].domain,
            erm: erm.item(),
            penalty: penalty_value,
            alignment: align_value,
            lambda_eff,
            align_weight,
            total: loss.item(),
            mask_density: None,
            tau: None,
        };
        if !log.total.is_finite() {
            return Ok((log, Vec::new()));
        }
        let grads = bound.grads(&tape.backward(loss)?);
        Ok((log, grads))
    }

    fn andmask_grads(&mut self, subs: &[SubBatch]) -> Result<(StepLog, Vec<Tensor>)> {
        let cfg = self.config.clone();
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let mut losses = Vec::with_capacity(subs.len());
        let mut logits = Vec::with_capacity(subs.len());
        for s in subs {
            let l = bound.classify(bound.features(tape.constant(s.x.clone())));
            losses.push(l.cross_entropy(&s.y)?);
            logits.push(l);
        }
        let n_total: usize = subs.iter().map(|s| s.y.len()).sum();
        let erm_value: f64 = losses
            .iter()
            .zip(subs)
            .map(|(l, s)| l.item() * s.y.len() as f64)
            .sum::<f64>()
            / n_total as f64;
        let per_domain: Vec<Vec<Tensor>> = losses
            .iter()
            .map(|l| Ok(bound.grads(&tape.backward(*l)?)))
            .collect::<Result<_>>()?;

        let n_params = per_domain[0].len();
        let mut out = Vec::with_capacity(n_params);
        let mut kept = 0.0;
        let mut coords = 0usize;
        let mut avg_flat = Vec::new();
        let tailored = cfg.penalty.variant == Variant::Tailored;
        for p in 0..n_params {
            let shape = per_domain[0][p].shape().to_vec();
            let (mask, grads): (Vec<f64>, Vec<&[f64]>) = if tailored {
                let grads: Vec<&[f64]> = per_domain.iter().map(|g| g[p].data()).collect();
                (andmask_soft_mask(&grads, self.tau, cfg.penalty.temperature)?, grads)
            } else {
                let stored: Vec<&[f64]> = self
                    .priors
                    .values()
                    .map(|pr| match &pr.payload {
                        PriorPayload::MeanGradient { grads } => Ok(grads[p].data()),
                        other => Err(Error::MethodMismatch {
                            stat: "mean_gradient",
                            prior: other.kind(),
                        }),
                    })
                    .collect::<Result<_>>()?;
                let current = per_domain[0][p].data();
                let mask = andmask_hard_mask(current, &stored, self.tau)?;
                let mut all = vec![current];
                all.extend(stored);
                (mask, all)
            };
            kept += mask.iter().sum::<f64>();
            coords += mask.len();
            let s = grads.len() as f64;
            avg_flat.extend((0..mask.len()).map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / s));
            out.push(Tensor::new(shape, andmask_apply(&mask, &grads, cfg.penalty.mask_eps)?)?);
        }
        let density = kept / coords.max(1) as f64;

        let align_weight = if tailored { cfg.align_weight() } else { 0.0 };
        let mut align_value = 0.0;
        if align_weight != 0.0 && subs.len() > 1 {
            let terms: Vec<AlignTerm<'_, '_>> = (1..subs.len())
                .map(|i| AlignTerm::Logits {
                    current: logits[i],
                    stored: subs[i].z.as_ref().expect("replayed batch carries z"),
                })
                .collect();
            if let Some(kd) = alignment_loss(Method::AndMask, &terms, cfg.penalty.log_eps)? {
                align_value = kd.item();
                let kd_grads = bound.grads(&tape.backward(kd)?);
                let kd_flat: Vec<f64> = kd_grads.iter().flat_map(|g| g.data().iter().copied()).collect();
                let kd_flat = if cfg.penalty.kd_projection {
                    kd_conflict_projection(&kd_flat, &avg_flat)?
                } else {
                    kd_flat
                };
                let mut off = 0;
                for g in &mut out {
                    for v in g.data_mut() {
                        *v += align_weight * kd_flat[off];
                        off += 1;
                    }
                }
            }
        }
        let tau_used = self.tau;
        if tailored && cfg.penalty.adaptive_tau {
            self.tau = adapt_tau(self.tau, density);
        }
        let log = StepLog {
            step: self.step,
            domain: subs[0].domain,
            erm: erm_value,
            penalty: 0.0,
            alignment: align_value,
            lambda_eff: 0.0,
            align_weight,
            total: erm_value + align_weight * align_value,
            mask_density: Some(density),
            tau: Some(tau_used),
        };
        Ok((log, out))
    }

    /// `z` for every row of `x` under the current parameters.
    fn anchors(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.model.features(x)?;
        match self.config.anchor {
            AnchorKind::Features => Ok(f),
            AnchorKind::Logits => self.model.classify(&f),
        }
    }

    /// Trains `steps_per_domain` steps on `train`, then fills the buffer,
    /// stores the domain prior and a snapshot.
    pub fn train_domain(&mut self, train: &Domain) -> Result<()> {
        for _ in 0..self.config.steps_per_domain {
            let subs = self.compose_batch(train)?;
            self.train_step(&subs)?;
        }
        self.domains_seen += 1;
        if self.buffer.capacity() > 0 {
            self.buffer.rebalance_capacity(self.domains_seen)?;
            let z = self.anchors(&train.inputs)?;
            self.buffer.insert_rows(train.id, &train.inputs, &train.labels, &z)?;
        }
        if self.config.method() != Method::Erm {
            let prior = domain_prior(
                &self.model,
                train,
                self.config.method(),
                self.rff.as_ref(),
                self.config.prior_batch_size,
            )?;
            self.priors.insert(train.id, prior);
        }
        self.snapshots.insert(train.id, self.model.snapshot());
        if self.config.ablation == Ablation::DynamicAnchors {
            self.refresh_anchors(train.id)?;
        }
        Ok(())
    }

    /// Recomputes priors and stored `z` of earlier domains from their buffer
    /// partitions under the current parameters.
    fn refresh_anchors(&mut self, current: DomainId) -> Result<()> {
        for d in self.buffer.domains() {
            if d == current {
                continue;
            }
            let batch = self.buffer.partition_batch(d)?;
            if self.config.method() != Method::Erm {
                let prior = crate::stats::compute_domain_prior(
                    &self.model,
                    d,
                    &batch.x,
                    &batch.y,
                    self.config.method(),
                    self.rff.as_ref(),
                    self.config.prior_batch_size,
                )?;
                self.priors.insert(d, prior);
            }
            let z = self.anchors(&batch.x)?;
            self.buffer.refresh_z(d, &z)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub target_accuracy: f64,
    pub target_macro_f1: f64,
    /// Mean accuracy over source validation splits after the last domain.
    pub source_val_accuracy: f64,
    pub accuracy_matrix: AccuracyMatrix,
    pub bwt: Option<f64>,
    pub priors: Vec<DomainPrior>,
    pub logs: Vec<StepLog>,
    #[serde(skip)]
    pub model: Option<Model>,
}

/// Trains over all sources in order and evaluates on the target.
pub fn run_sequence(config: &TrainConfig, stream: &DomainStream) -> Result<TrainResult> {
    run_sequence_with(config, stream, |_, _| Ok(()))
}

/// As [`run_sequence`], calling `after_domain` with the trainer once each
/// source is finished.
pub fn run_sequence_with(
    config: &TrainConfig,
    stream: &DomainStream,
    mut after_domain: impl FnMut(usize, &Trainer) -> Result<()>,
) -> Result<TrainResult> {
    config.validate()?;
    let stream = if config.standardize {
        stream.standardized()
    } else {
        stream.clone()
    };
    let splits = stream
        .sources
        .iter()
        .map(|d| split_train_val(d, config.train_fraction, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(config.clone(), stream.input_dim, stream.num_classes)?;
    let mut matrix = AccuracyMatrix::default();
    for (i, (train, _)) in splits.iter().enumerate() {
        trainer.train_domain(train)?;
        let row = splits[..=i]
            .iter()
            .map(|(_, val)| accuracy(&trainer.model, &val.inputs, &val.labels))
            .collect::<Result<Vec<_>>>()?;
        matrix.push_row(row)?;
        after_domain(i, &trainer)?;
    }
    let target = &stream.target;
    let preds = predict_classes(&trainer.model, &target.inputs)?;
    let hits = preds.iter().zip(&target.labels).filter(|(p, y)| p == y).count();
    let last = matrix.rows.last().expect("at least one source");
    Ok(TrainResult {
        target_accuracy: hits as f64 / target.len() as f64,
        target_macro_f1: macro_f1(&preds, &target.labels, stream.num_classes)?,
        source_val_accuracy: last.iter().sum::<f64>() / last.len() as f64,
        bwt: matrix.bwt(),
        accuracy_matrix: matrix,
        priors: trainer.priors.values().cloned().collect(),
        logs: std::mem::take(&mut trainer.logs),
        model: Some(trainer.model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_spurious_blobs;

    fn small(method: Method, variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::new(method, variant);
        c.steps_per_domain = 5;
        c.batch_size = 8;
        c.hidden = vec![6];
        c.buffer_capacity = 40;
        c.lr = 0.05;
        c
    }

    #[test]
    fn anneal_cases() {
        assert_eq!(anneal_weight(0, 0, 7.0), 7.0);
        assert_eq!(anneal_weight(99, 100, 1000.0), 1.0);
        assert_eq!(anneal_weight(100, 100, 1000.0), 1000.0);
    }

    #[test]
    fn sgd_cases() {
        let mut p = Tensor::row(vec![1.0]);
        optimizer_step(&mut [&mut p], &[Tensor::row(vec![1.0])], 0.1, 0.0).unwrap();
        assert_eq!(p.data(), [0.9]);
        optimizer_step(&mut [&mut p], &[Tensor::row(vec![3.0])], 0.0, 0.5).unwrap();
        assert_eq!(p.data(), [0.9]);
        assert!(optimizer_step(&mut [&mut p], &[], 0.1, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut a = AdamState::default();
        a.step(&mut [&mut p], &[Tensor::row(vec![0.3, -40.0])], 0.1, 0.0).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 1.9).abs() < 1e-7);
        assert_eq!(a.t, 1);
    }

    #[test]
    fn replacement_only_when_short() {
        let mut r = rng::stream(0, 0);
        let mut idx = sample_indices(&mut r, 5, 5);
        idx.sort_unstable();
        assert_eq!(idx, [0, 1, 2, 3, 4]);
        assert_eq!(sample_indices(&mut r, 1, 3), [0, 0, 0]);
    }

    #[test]
    fn compose_batch_grows_with_history() {
        let s = gen_spurious_blobs(3, 40, 0.8, 1).unwrap();
        let mut t = Trainer::new(small(Method::Coral, Variant::Tailored), 4, 2).unwrap();
        assert_eq!(t.compose_batch(&s.sources[0]).unwrap().len(), 1);
        t.train_domain(&s.sources[0]).unwrap();
        t.train_domain(&s.sources[1]).unwrap();
        let subs = t.compose_batch(&s.sources[2]).unwrap();
        assert_eq!(subs.iter().map(|b| b.domain).collect::<Vec<_>>(), [3, 1, 2]);
        assert!(subs.iter().all(|b| b.y.len() == 8));
    }

    #[test]
    fn priors_and_snapshots_track_domains() {
        let s = gen_spurious_blobs(2, 40, 0.8, 2).unwrap();
        let mut t = Trainer::new(small(Method::Vrex, Variant::Tailored), 4, 2).unwrap();
        t.train_domain(&s.sources[0]).unwrap();
        assert_eq!(t.priors.keys().copied().collect::<Vec<_>>(), [1]);
        assert_eq!(t.snapshots.len(), 1);
        assert_eq!(t.buffer.partition_len(1), 40);
        t.train_domain(&s.sources[1]).unwrap();
        assert_eq!(t.buffer.partition_len(1), 20);
        assert_eq!(t.priors.len(), 2);
    }

    #[test]
    fn naive_variants_keep_no_buffer() {
        let s = gen_spurious_blobs(2, 40, 0.8, 2).unwrap();
        let mut t = Trainer::new(small(Method::Fishr, Variant::Naive), 4, 2).unwrap();
        t.train_domain(&s.sources[0]).unwrap();
        t.train_domain(&s.sources[1]).unwrap();
        assert!(t.buffer.is_empty());
        assert_eq!(t.compose_batch(&s.sources[1]).unwrap().len(), 1);
    }

    #[test]
    fn zero_weights_log_zero_terms() {
        let s = gen_spurious_blobs(2, 40, 0.8, 3).unwrap();
        let mut c = small(Method::Coral, Variant::Tailored);
        c.penalty.lambda = 0.0;
        c.penalty.beta = 0.0;
        let mut t = Trainer::new(c, 4, 2).unwrap();
        t.train_domain(&s.sources[0]).unwrap();
        t.train_domain(&s.sources[1]).unwrap();
        assert!(t.logs.iter().all(|l| l.penalty == 0.0 && l.alignment == 0.0 && l.total == l.erm));
    }

    #[test]
    fn total_loss_decomposes() {
        let s = gen_spurious_blobs(3, 40, 0.8, 4).unwrap();
        for m in [Method::Vrex, Method::Fishr, Method::Coral, Method::Mmd] {
            for v in [Variant::Naive, Variant::Tailored] {
                let r = run_sequence(&small(m, v), &s).unwrap();
                for l in &r.logs {
                    let sum = l.erm + l.lambda_eff * l.penalty + l.align_weight * l.alignment;
                    assert!((sum - l.total).abs() <= 1e-12 * l.total.abs().max(1.0), "{m} {v}: {l:?}");
                }
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let s = gen_spurious_blobs(2, 40, 0.8, 5).unwrap();
        let mut c = small(Method::Erm, Variant::Tailored);
        c.lr = 1e300;
        c.steps_per_domain = 50;
        match run_sequence(&c, &s) {
            Err(Error::Diverged { reason, .. }) => assert!(reason.contains("erm")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_source_gives_one_by_one_matrix() {
        let s = gen_spurious_blobs(1, 40, 0.8, 6).unwrap();
        let r = run_sequence(&small(Method::Erm, Variant::Tailored), &s).unwrap();
        assert_eq!(r.accuracy_matrix.rows.len(), 1);
        assert_eq!(r.bwt, None);
    }

    #[test]
    fn andmask_variants_run() {
        let s = gen_spurious_blobs(3, 40, 0.8, 7).unwrap();
        for v in [Variant::Naive, Variant::Tailored] {
            let r = run_sequence(&small(Method::AndMask, v), &s).unwrap();
            assert!(r.logs.iter().all(|l| l.mask_density.is_some()));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small(Method::Fishr, Variant::Tailored);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = small(Method::Vrex, Variant::Tailored);
        c.penalty.lambda = -1.0;
        assert!(Trainer::new(c, 4, 2).is_err());
    }
}
