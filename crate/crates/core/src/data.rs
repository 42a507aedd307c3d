//! Domain streams: synthetic generators, CSV ingestion, splits and
//! source-only standardization.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::DomainId;

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub id: DomainId,
    pub name: String,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn new(id: DomainId, name: impl Into<String>, inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "domain {name}: inputs {:?} with {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data(format!("domain {name} is empty")));
        }
        Ok(Domain {
            id,
            name,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn with_rows(&self, idx: &[usize]) -> Domain {
        let (inputs, labels) = self.subset(idx);
        Domain {
            id: self.id,
            name: self.name.clone(),
            inputs,
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub sources: Vec<Domain>,
    pub target: Domain,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Original label value for each dense class index.
    pub label_names: Vec<String>,
}

impl DomainStream {
    pub fn new(sources: Vec<Domain>, target: Domain, num_classes: usize, label_names: Vec<String>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Data("stream needs at least one source domain".into()));
        }
        if label_names.len() != num_classes {
            return Err(Error::Data(format!(
                "{} label names for {num_classes} classes",
                label_names.len()
            )));
        }
        let input_dim = target.input_dim();
        for d in sources.iter().chain(std::iter::once(&target)) {
            if d.input_dim() != input_dim {
                return Err(Error::Shape(format!(
                    "domain {} has {} features, expected {input_dim}",
                    d.name,
                    d.input_dim()
                )));
            }
            if let Some(&label) = d.labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Label {
                    label,
                    classes: num_classes,
                });
            }
            if sources.iter().filter(|s| s.id == d.id).count() + usize::from(target.id == d.id) != 1 {
                return Err(Error::Data(format!("domain id {} is not unique", d.id)));
            }
        }
        Ok(DomainStream {
            sources,
            target,
            num_classes,
            input_dim,
            label_names,
        })
    }

    /// Copy of the stream with every domain transformed by statistics of the
    /// sources alone.
    pub fn standardized(&self) -> DomainStream {
        let st = Standardizer::fit(&self.sources);
        let apply = |d: &Domain| Domain {
            inputs: st.apply(&d.inputs),
            ..d.clone()
        };
        DomainStream {
            sources: self.sources.iter().map(apply).collect(),
            target: apply(&self.target),
            ..self.clone()
        }
    }

    /// Writes `domain,label,x0..` rows: sources in order, then the target.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["domain".to_string(), "label".to_string()];
        header.extend((0..self.input_dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for d in self.sources.iter().chain(std::iter::once(&self.target)) {
            for (i, &y) in d.labels.iter().enumerate() {
                let mut rec = vec![d.name.clone(), self.label_names[y].clone()];
                rec.extend(d.inputs.row_slice(i).iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.input_dim).map(|j| format!("x{j}")).collect()
    }
}

/// Per-feature affine map `(x - mean) / std`, fitted on source domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(domains: &[Domain]) -> Self {
        let d = domains.first().map_or(0, Domain::input_dim);
        let n: usize = domains.iter().map(Domain::len).sum();
        let mut mean = vec![0.0; d];
        for dom in domains {
            for i in 0..dom.len() {
                for (m, v) in mean.iter_mut().zip(dom.inputs.row_slice(i)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for dom in domains {
            for i in 0..dom.len() {
                for ((s, v), m) in var.iter_mut().zip(dom.inputs.row_slice(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let cols = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % cols;
            *v = (*v - self.mean[j]) / self.scale[j];
        }
        out
    }
}

/// Splits a domain into disjoint train and validation parts. The train part
/// holds `round(fraction * n)` rows, clamped so both parts are non-empty.
pub fn split_train_val(domain: &Domain, fraction: f64, seed: u64) -> Result<(Domain, Domain)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = domain.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "domain {} has {n} rows, cannot split",
            domain.name
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, rng::STREAM_SPLIT, u64::from(domain.id)));
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok((domain.with_rows(&idx[..n_train]), domain.with_rows(&idx[n_train..])))
}

fn check_balanced(n_per_domain: usize, classes: usize) -> Result<usize> {
    if n_per_domain == 0 || n_per_domain % classes != 0 {
        return Err(Error::Config(format!(
            "n_per_domain = {n_per_domain} must be a positive multiple of {classes}"
        )));
    }
    Ok(n_per_domain / classes)
}

fn binary_names() -> Vec<String> {
    vec!["0".into(), "1".into()]
}

/// Balanced labels `[0; half] ++ [1; half]` in shuffled order.
fn balanced_labels(half: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..2 * half).map(|i| usize::from(i >= half)).collect();
    labels.shuffle(rng);
    labels
}

/// Unrotated two-moons sample drawn for the domain at `position` in the
/// stream (the target sits at position `k_sources`). Centred at the origin.
pub fn moons_base(n_per_domain: usize, noise: f64, seed: u64, position: usize) -> Result<(Tensor, Vec<usize>)> {
    let half = check_balanced(n_per_domain, 2)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise {noise} must be finite and non-negative")));
    }
    let mut rng = rng::substream(seed, rng::STREAM_DATA, position as u64);
    let labels = balanced_labels(half, &mut rng);
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = Vec::with_capacity(2 * n_per_domain);
    for &y in &labels {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x0, x1) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (e0, e1) = if noise > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(x0 - 0.5 + e0);
        data.push(x1 - 0.25 + e1);
    }
    Ok((Tensor::from_rows(n_per_domain, 2, data)?, labels))
}

fn rotate(x: &Tensor, degrees: f64) -> Tensor {
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(2) {
        let (a, b) = (row[0], row[1]);
        row[0] = c * a - s * b;
        row[1] = s * a + c * b;
    }
    out
}

fn same_angle(a: f64, b: f64) -> bool {
    (a - b).rem_euclid(360.0) == 0.0
}

/// Two-moons binary task where source `i` is rotated by `rotations_deg[i]`
/// and the target by `target_rotation_deg`.
pub fn gen_rotated_moons(
    k_sources: usize,
    rotations_deg: &[f64],
    target_rotation_deg: f64,
    n_per_domain: usize,
    noise: f64,
    seed: u64,
) -> Result<DomainStream> {
    if k_sources == 0 || rotations_deg.len() != k_sources {
        return Err(Error::Config(format!(
            "{} rotations given for {k_sources} sources",
            rotations_deg.len()
        )));
    }
    if rotations_deg
        .iter()
        .chain(std::iter::once(&target_rotation_deg))
        .any(|r| !r.is_finite())
    {
        return Err(Error::Config("rotations must be finite".into()));
    }
    if rotations_deg.iter().any(|&r| same_angle(r, target_rotation_deg)) {
        return Err(Error::Config(format!(
            "target rotation {target_rotation_deg} also appears among the sources"
        )));
    }
    let make = |position: usize, degrees: f64| -> Result<Domain> {
        let (x, y) = moons_base(n_per_domain, noise, seed, position)?;
        Domain::new(position as DomainId + 1, format!("rot{degrees}"), rotate(&x, degrees), y)
    };
    let sources = rotations_deg
        .iter()
        .enumerate()
        .map(|(i, &r)| make(i, r))
        .collect::<Result<Vec<_>>>()?;
    let target = make(k_sources, target_rotation_deg)?;
    DomainStream::new(sources, target, 2, binary_names())
}

/// Number of input features produced by [`gen_spurious_blobs`].
pub const BLOBS_DIM: usize = 4;

/// Binary task with one stable feature (`x0`), one spurious feature (`x1`)
/// and two nuisance features carrying a per-domain offset.
///
/// In source `i` the spurious feature has sign `c_i·(2y−1)` with probability
/// `spurious_strength` and a random sign otherwise, where `c_i` alternates
/// `+1, −1, …` along the stream. In the target the sign is always random.
pub fn gen_spurious_blobs(k_sources: usize, n_per_domain: usize, spurious_strength: f64, seed: u64) -> Result<DomainStream> {
    if k_sources == 0 {
        return Err(Error::Config("need at least one source".into()));
    }
    if !(0.0..=1.0).contains(&spurious_strength) {
        return Err(Error::Config(format!(
            "spurious_strength {spurious_strength} outside [0, 1]"
        )));
    }
    let half = check_balanced(n_per_domain, 2)?;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let make = |position: usize| -> Result<Domain> {
        let is_target = position == k_sources;
        let mut rng = rng::substream(seed, rng::STREAM_DATA, position as u64);
        let labels = balanced_labels(half, &mut rng);
        let polarity = if position % 2 == 0 { 1.0 } else { -1.0 };
        let offset = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let mut data = Vec::with_capacity(BLOBS_DIM * n_per_domain);
        for &y in &labels {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            data.push(sign + std_normal.sample(&mut rng));
            let aligned = !is_target && rng.random::<f64>() < spurious_strength;
            let magnitude = rng.random_range(0.5..1.5);
            let spurious_sign = if aligned {
                polarity * sign
            } else if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            };
            data.push(spurious_sign * magnitude);
            for o in offset {
                data.push(o + std_normal.sample(&mut rng));
            }
        }
        let name = if is_target {
            "target".to_string()
        } else {
            format!("source{}", position + 1)
        };
        Domain::new(
            position as DomainId + 1,
            name,
            Tensor::from_rows(n_per_domain, BLOBS_DIM, data)?,
            labels,
        )
    };
    let sources = (0..k_sources).map(make).collect::<Result<Vec<_>>>()?;
    let target = make(k_sources)?;
    DomainStream::new(sources, target, 2, binary_names())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSpec {
    pub domain_column: String,
    pub label_column: String,
    /// `None` selects every remaining column, in file order.
    pub feature_columns: Option<Vec<String>>,
    /// Domain value used as target; the last domain to appear otherwise.
    pub target_domain: Option<String>,
    /// Subsample each domain to its minority class count.
    pub balance_classes: bool,
    pub seed: u64,
}

impl CsvSpec {
    pub fn new(domain_column: impl Into<String>, label_column: impl Into<String>) -> Self {
        CsvSpec {
            domain_column: domain_column.into(),
            label_column: label_column.into(),
            feature_columns: None,
            target_domain: None,
            balance_classes: false,
            seed: 0,
        }
    }
}

/// Reads a headed CSV file into a stream. Domains take ids in order of first
/// appearance; labels are re-indexed densely (numerically when every label
/// parses as a number, lexically otherwise).
pub fn load_csv(path: impl AsRef<Path>, spec: &CsvSpec) -> Result<DomainStream> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column {name:?}", path.display())))
    };
    let domain_col = column(&spec.domain_column)?;
    let label_col = column(&spec.label_column)?;
    let feature_cols: Vec<usize> = match &spec.feature_columns {
        Some(names) => names.iter().map(|n| column(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&j| j != domain_col && j != label_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Data(format!("{}: no feature columns", path.display())));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<f64>, Vec<String>)> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let domain = record.get(domain_col).unwrap_or_default().to_string();
        let label = record.get(label_col).unwrap_or_default().trim().to_string();
        let entry = groups.entry(domain.clone()).or_insert_with(|| {
            order.push(domain.clone());
            (Vec::new(), Vec::new())
        });
        for &j in &feature_cols {
            let raw = record.get(j).unwrap_or_default().trim();
            let v: f64 = raw.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}: column {:?} value {raw:?} is not numeric",
                    path.display(),
                    line + 2,
                    &headers[j]
                ))
            })?;
            entry.0.push(v);
        }
        entry.1.push(label);
    }

    let mut label_names: Vec<String> = groups
        .values()
        .flat_map(|(_, ys)| ys.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let numeric: Option<Vec<f64>> = label_names.iter().map(|s| s.parse().ok()).collect();
    if let Some(values) = numeric {
        let mut pairs: Vec<(f64, String)> = values.into_iter().zip(label_names).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        label_names = pairs.into_iter().map(|p| p.1).collect();
    }
    let label_index: HashMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let target_name = match &spec.target_domain {
        Some(t) if groups.contains_key(t) => t.clone(),
        Some(t) => {
            return Err(Error::Data(format!(
                "{}: target domain {t:?} has no rows",
                path.display()
            )))
        }
        None => order
            .last()
            .cloned()
            .ok_or_else(|| Error::Data(format!("{}: no data rows", path.display())))?,
    };
    if order.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least two domains, found {}",
            path.display(),
            order.len()
        )));
    }

    let d = feature_cols.len();
    let classes = label_names.len();
    let mut sources = Vec::new();
    let mut target = None;
    let source_names = order.iter().filter(|n| **n != target_name);
    for (id, name) in source_names.chain(std::iter::once(&target_name)).enumerate() {
        let (xs, ys) = &groups[name];
        let labels: Vec<usize> = ys.iter().map(|y| label_index[y.as_str()]).collect();
        let mut domain = Domain::new(
            id as DomainId + 1,
            name.clone(),
            Tensor::from_rows(labels.len(), d, xs.clone())?,
            labels,
        )?;
        if spec.balance_classes {
            domain = balance(&domain, classes, spec.seed)?;
        }
        if *name == target_name {
            target = Some(domain);
        } else {
            sources.push(domain);
        }
    }
    DomainStream::new(sources, target.expect("target is in order"), classes, label_names)
}

/// Subsamples each present class to the smallest present class count,
/// keeping the original row order.
fn balance(domain: &Domain, classes: usize, seed: u64) -> Result<Domain> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in domain.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let minority = by_class
        .iter()
        .map(Vec::len)
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    let mut rng = rng::substream(seed, rng::STREAM_DATA, u64::from(domain.id));
    let mut keep = Vec::new();
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
        keep.extend_from_slice(&rows[..minority.min(rows.len())]);
    }
    keep.sort_unstable();
    if keep.is_empty() {
        return Err(Error::Data(format!("domain {} is empty after balancing", domain.name)));
    }
    Ok(domain.with_rows(&keep))
}
