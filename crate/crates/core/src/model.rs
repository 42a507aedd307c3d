//! The classifier `h = g_ω ∘ f_θ`: an MLP feature extractor followed by an
//! affine head over `C` classes.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Identity => x,
        }
    }

    fn apply_var<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// Which side of the split a parameter belongs to: θ or ω.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
}

/// Affine map `x · weight + bias` with `weight: [in, out]`, `bias: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [1, weight.cols()] {
            return Err(Error::Shape(format!(
                "linear layer weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
        }
    }

    /// Uniform fan-in initialization, `U(-gain·√(3/fan_in), +gain·√(3/fan_in))`, zero bias.
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut Rng) -> Self {
        let bound = gain * (3.0 / inputs.max(1) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::from_rows(inputs, outputs, data).unwrap(),
            bias: Tensor::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add_row(&self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    extractor: Vec<Linear>,
    classifier: Linear,
    activation: Activation,
}

impl Model {
    /// Randomly initialized MLP with the given hidden widths. With no hidden
    /// layers the extractor is the identity and the latent width equals
    /// `input_dim`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let gain = match activation {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh | Activation::Identity => 1.0,
        };
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            extractor.push(Linear::init(width, h, gain, rng));
            width = h;
        }
        let classifier = Linear::init(width, classes, 1.0, rng);
        Self::from_layers(extractor, classifier, activation)
    }

    pub fn from_layers(extractor: Vec<Linear>, classifier: Linear, activation: Activation) -> Result<Self> {
        for pair in extractor.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "extractor widths do not chain: {} -> {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        if let Some(last) = extractor.last() {
            if last.outputs() != classifier.inputs() {
                return Err(Error::Shape(format!(
                    "latent width {} differs from classifier input {}",
                    last.outputs(),
                    classifier.inputs()
                )));
            }
        }
        Ok(Model {
            extractor,
            classifier,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map_or(self.classifier.inputs(), Linear::inputs)
    }

    pub fn latent_dim(&self) -> usize {
        self.classifier.inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of shape {:?}, model expects [n, {}]",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// `f_θ(x)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.extractor {
            h = self.activation.apply(layer.forward(&h));
        }
        Ok(h)
    }

    /// `g_ω(features)`.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.cols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "features of shape {:?}, classifier expects [n, {}]",
                features.shape(),
                self.latent_dim()
            )));
        }
        Ok(self.classifier.forward(features))
    }

    /// Logits `h(x) = g_ω(f_θ(x))`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.classify(&self.features(x)?)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * self.extractor.len() + 2);
        for i in 0..self.extractor.len() {
            names.push(format!("extractor.{i}.weight"));
            names.push(format!("extractor.{i}.bias"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    /// Parameters in canonical order: extractor layers, then classifier.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for l in &self.extractor {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.extractor {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Extractor; 2 * self.extractor.len()];
        g.extend([ParamGroup::Classifier, ParamGroup::Classifier]);
        g
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn num_params_in(&self, group: ParamGroup) -> usize {
        self.params()
            .iter()
            .zip(self.param_groups())
            .filter(|(_, g)| *g == group)
            .map(|(p, _)| p.len())
            .sum()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            params: self.params().into_iter().map(|p| tape.param(p.clone())).collect(),
            layers: self.extractor.len(),
            activation: self.activation,
        }
    }

    /// Runs this architecture on externally created parameter leaves, given
    /// in canonical order.
    pub fn bind_params<'t>(&self, params: &[Var<'t>]) -> Result<BoundModel<'t>> {
        let own = self.params();
        if params.len() != own.len() || params.iter().zip(&own).any(|(v, p)| v.shape() != p.shape()) {
            return Err(Error::Shape("parameter leaves do not match the architecture".into()));
        }
        Ok(BoundModel {
            params: params.to_vec(),
            layers: self.extractor.len(),
            activation: self.activation,
        })
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(Arc::new(self.clone()))
    }

    /// Text parameter file: a header, then per parameter one
    /// `param <name> <rows> <cols>` line followed by its row-major values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "dicl-model 1").unwrap();
        writeln!(s, "activation {}", self.activation.name()).unwrap();
        for (name, p) in self.param_names().iter().zip(self.params()) {
            writeln!(s, "param {} {} {}", name, p.rows(), p.cols()).unwrap();
            let values: Vec<String> = p.data().iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", values.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("model file: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("dicl-model 1") {
            return Err(bad("missing header"));
        }
        let activation = match lines.next().and_then(|l| l.strip_prefix("activation ")) {
            Some("relu") => Activation::Relu,
            Some("tanh") => Activation::Tanh,
            Some("identity") => Activation::Identity,
            _ => return Err(bad("missing or unknown activation")),
        };
        let mut named: Vec<(String, Tensor)> = Vec::new();
        while let Some(head) = lines.next() {
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(bad(&format!("bad parameter header `{head}`")));
            }
            let rows: usize = parts[2].parse().map_err(|_| bad("bad row count"))?;
            let cols: usize = parts[3].parse().map_err(|_| bad("bad column count"))?;
            let values = lines.next().unwrap_or("");
            let data = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad value `{v}`"))))
                .collect::<Result<Vec<f64>>>()?;
            named.push((parts[1].to_string(), Tensor::from_rows(rows, cols, data)?));
        }
        let mut take = |name: String| -> Result<Tensor> {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| bad(&format!("missing parameter {name}")))?;
            Ok(named.remove(pos).1)
        };
        let classifier = Linear::new(take("classifier.weight".into())?, take("classifier.bias".into())?)?;
        let mut extractor = Vec::new();
        let mut i = 0;
        loop {
            let w = format!("extractor.{i}.weight");
            let Ok(weight) = take(w) else { break };
            extractor.push(Linear::new(weight, take(format!("extractor.{i}.bias"))?)?);
            i += 1;
        }
        if !named.is_empty() {
            return Err(bad(&format!("unexpected parameter {}", named[0].0)));
        }
        Model::from_layers(extractor, classifier, activation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Parameters `(θ_s, ω_s)` frozen at the end of a domain.
#[derive(Clone, Debug)]
pub struct ModelSnapshot(Arc<Model>);

impl ModelSnapshot {
    pub fn model(&self) -> &Model {
        &self.0
    }
}

/// A model whose parameters are leaves on a tape.
pub struct BoundModel<'t> {
    params: Vec<Var<'t>>,
    layers: usize,
    activation: Activation,
}

impl<'t> BoundModel<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn features(&self, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for i in 0..self.layers {
            let (w, b) = (self.params[2 * i], self.params[2 * i + 1]);
            h = self.activation.apply_var(h.matmul(w).add_row(b));
        }
        h
    }

    pub fn classify(&self, features: Var<'t>) -> Var<'t> {
        let (w, b) = (self.params[2 * self.layers], self.params[2 * self.layers + 1]);
        features.matmul(w).add_row(b)
    }

    /// Parameter gradients in canonical order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| grads.get(*p).expect("bound parameter gradient").clone())
            .collect()
    }
}

/// Mean cross-entropy `−log softmax(logits)[label]` over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Data("cross-entropy mean over an empty batch".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Label {
            label,
            classes: logits.cols(),
        });
    }
    let per = logits.cross_entropy_rows(labels);
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
