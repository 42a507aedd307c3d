//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar replays the record in reverse and returns
//! gradients for the leaves registered as parameters. A fresh tape is built
//! for every training step.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf { param: bool },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Log(usize),
    Cos(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanRows(usize),
    BroadcastRows(usize),
    BroadcastScalar(usize),
    AddRow(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(usize, usize),
    RowOuter(usize, usize),
    SoftmaxRows(usize),
    CrossEntropy(usize, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a parameter leaf; `None` for anything else.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient on `backward`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { param: true })
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { param: false })
    }

    fn owns(&self, var: Var<'_>) -> bool {
        std::ptr::eq(self, var.tape) && var.id < self.len()
    }

    /// Reverse pass from a scalar `loss`. Every parameter leaf on the tape
    /// gets an entry, zero when it does not influence `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::DanglingReference);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0]).unwrap());
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    if *param {
                        out.by_node.insert(id, g);
                    }
                }
                op => propagate(op, node, &nodes, g, &mut grads),
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { param: true }) {
                out.by_node.entry(id).or_insert_with(|| {
                    Tensor::new(node.value.shape().to_vec(), vec![0.0; node.value.len()])
                        .unwrap()
                });
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(op: &Op, node: &Node, nodes: &[Node], g: Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf { .. } => unreachable!(),
        Op::MatMul(a, b) => {
            accumulate(grads, *a, g.matmul(&val(*b).transpose()));
            accumulate(grads, *b, val(*a).transpose().matmul(&g));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, *b, g.map(|v| -v));
            accumulate(grads, *a, g);
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, g.zip_map(val(*b), |d, y| d * y));
            accumulate(grads, *b, g.zip_map(val(*a), |d, x| d * x));
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(grads, *a, g.zip_map(y, |d, y| d / y));
            let gb = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((d, x), y)| -d * x / (y * y))
                    .collect(),
            )
            .unwrap();
            accumulate(grads, *b, gb);
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|d| d * c)),
        Op::AddScalar(a) => accumulate(grads, *a, g),
        Op::Relu(a) => accumulate(grads, *a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
        Op::Tanh(a) => accumulate(grads, *a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
        Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |d, x| d / x)),
        Op::Cos(a) => accumulate(grads, *a, g.zip_map(val(*a), |d, x| -d * x.sin())),
        Op::Sqrt(a) => accumulate(grads, *a, g.zip_map(&node.value, |d, y| 0.5 * d / y)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
        Op::Sum(a) => {
            let d = g.item();
            let x = val(*a);
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), vec![d; x.len()]).unwrap());
        }
        Op::Mean(a) => {
            let x = val(*a);
            let d = g.item() / x.len() as f64;
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), vec![d; x.len()]).unwrap());
        }
        Op::SumRows(a) | Op::MeanRows(a) => {
            let n = val(*a).rows();
            let scale = if matches!(op, Op::MeanRows(_)) { 1.0 / n as f64 } else { 1.0 };
            let row: Vec<f64> = g.data().iter().map(|d| d * scale).collect();
            let mut data = Vec::with_capacity(n * row.len());
            for _ in 0..n {
                data.extend_from_slice(&row);
            }
            accumulate(grads, *a, Tensor::from_rows(n, row.len(), data).unwrap());
        }
        Op::BroadcastRows(a) => accumulate(grads, *a, g.sum_rows()),
        Op::BroadcastScalar(a) => accumulate(grads, *a, Tensor::scalar(g.sum())),
        Op::AddRow(a, b) => {
            accumulate(grads, *b, g.sum_rows());
            accumulate(grads, *a, g);
        }
        Op::SliceRows(a, start) => {
            let x = val(*a);
            let c = x.cols();
            let mut full = Tensor::zeros(x.rows(), c);
            full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, *a, full);
        }
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let n = g.rows();
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * cb);
            for i in 0..n {
                let r = g.row_slice(i);
                ga.extend_from_slice(&r[..ca]);
                gb.extend_from_slice(&r[ca..]);
            }
            accumulate(grads, *a, Tensor::from_rows(n, ca, ga).unwrap());
            accumulate(grads, *b, Tensor::from_rows(n, cb, gb).unwrap());
        }
        Op::RowOuter(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (n, h, c) = (x.rows(), x.cols(), y.cols());
            let mut ga = vec![0.0; n * h];
            let mut gb = vec![0.0; n * c];
            for i in 0..n {
                let gr = g.row_slice(i);
                let xr = x.row_slice(i);
                let yr = y.row_slice(i);
                for p in 0..h {
                    let block = &gr[p * c..(p + 1) * c];
                    ga[i * h + p] = block.iter().zip(yr).map(|(d, y)| d * y).sum();
                    for (q, d) in block.iter().enumerate() {
                        gb[i * c + q] += d * xr[p];
                    }
                }
            }
            accumulate(grads, *a, Tensor::from_rows(n, h, ga).unwrap());
            accumulate(grads, *b, Tensor::from_rows(n, c, gb).unwrap());
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for i in 0..y.rows() {
                let yr = y.row_slice(i);
                let gr = g.row_slice(i);
                let inner: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                for j in 0..c {
                    out[i * c + j] = yr[j] * (gr[j] - inner);
                }
            }
            accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out).unwrap());
        }
        Op::CrossEntropy(a, labels) => {
            let x = val(*a);
            let n = x.rows() as f64;
            let d = g.item() / n;
            let mut p = x.softmax_rows();
            let c = p.cols();
            for (i, &y) in labels.iter().enumerate() {
                p.data_mut()[i * c + y] -= 1.0;
            }
            accumulate(grads, *a, p.map(|v| v * d));
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.with_value(|t| t.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|t| t.cols())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = self.with_value(f);
        self.tape.push(value, op)
    }

    fn binary(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(value, op)
    }

    fn check_same_shape(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(|a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        self.check_same_shape(&other, "div");
        self.binary(&other, |a, b| a.zip_map(b, |x, y| x / y), Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|a| a.map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|a| a.map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::ln), Op::Log(self.id))
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::cos), Op::Cos(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|a| a.map(|x| x * x), Op::Square(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Tensor::scalar(a.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(|a| Tensor::scalar(a.sum() / a.len() as f64), Op::Mean(self.id))
    }

    /// Column sums, `[n, m] -> [1, m]`.
    pub fn sum_rows(&self) -> Var<'t> {
        self.unary(|a| a.sum_rows(), Op::SumRows(self.id))
    }

    /// Column means, `[n, m] -> [1, m]`.
    pub fn mean_rows(&self) -> Var<'t> {
        self.unary(|a| a.mean_rows(), Op::MeanRows(self.id))
    }

    /// Repeat a `[1, m]` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.rows(), 1, "broadcast_rows expects a single row");
                let mut data = Vec::with_capacity(n * a.len());
                for _ in 0..n {
                    data.extend_from_slice(a.data());
                }
                Tensor::from_rows(n, a.cols(), data).unwrap()
            },
            Op::BroadcastRows(self.id),
        )
    }

    /// Expand a scalar to a `[rows, cols]` tensor.
    pub fn broadcast_scalar(&self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(|a| Tensor::filled(rows, cols, a.item()), Op::BroadcastScalar(self.id))
    }

    /// `self + row` with the `[1, m]` row added to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(&row, |a, b| a.add_row(b), Op::AddRow(self.id, row.id))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        self.unary(|a| a.slice_rows(start, end), Op::SliceRows(self.id, start))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Tensor::concat_cols, Op::ConcatCols(self.id, other.id))
    }

    /// Row-wise outer product, see [`Tensor::row_outer`].
    pub fn row_outer(&self, other: Var<'t>) -> Var<'t> {
        self.binary(&other, Tensor::row_outer, Op::RowOuter(self.id, other.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.unary(|a| a.softmax_rows(), Op::SoftmaxRows(self.id))
    }

    /// Mean cross-entropy of row logits against `labels`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (n, c) = (self.rows(), self.cols());
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), n)));
        }
        if n == 0 {
            return Err(Error::Data("cross-entropy mean over an empty batch".into()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label { label, classes: c });
        }
        let labels: Rc<[usize]> = labels.into();
        let value = self.with_value(|a| {
            let per_row = a.cross_entropy_rows(&labels);
            Tensor::scalar(per_row.iter().sum::<f64>() / n as f64)
        });
        Ok(self.tape.push(value, Op::CrossEntropy(self.id, labels)))
    }

    /// Squared euclidean norm of all entries.
    pub fn sq_norm(&self) -> Var<'t> {
        self.square().sum()
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(&rhs, "add");
        self.binary(&rhs, |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(&rhs, "sub");
        self.binary(&rhs, |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.check_same_shape(&rhs, "mul");
        self.binary(&rhs, |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Differentiable per-sample cross-entropy gradients of an affine head
/// `logits = features · W + b`. Row `i` is `[vec(f_i ⊗ (p_i − e_{y_i})), p_i − e_{y_i}]`
/// with `W` flattened row-major.
pub fn classifier_grads_var<'t>(features: Var<'t>, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n || features.rows() != n {
        return Err(Error::Shape(format!(
            "per-sample gradients: {} features rows, {} logits rows, {} labels",
            features.rows(),
            n,
            labels.len()
        )));
    }
    let target = features.tape().constant(one_hot(labels, c)?);
    let delta = logits.softmax_rows() - target;
    Ok(features.row_outer(delta).concat_cols(delta))
}

/// Closed-form per-sample classifier gradients (tape-free).
pub fn per_sample_classifier_grads(features: &Tensor, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n || features.rows() != n {
        return Err(Error::Shape("per-sample gradients: row counts differ".into()));
    }
    let mut delta = logits.softmax_rows();
    delta = delta.zip_map(&one_hot(labels, c)?, |p, t| p - t);
    Ok(Tensor::concat_cols(&Tensor::row_outer(features, &delta), &delta))
}

/// Compare tape gradients of `loss_fn` with central differences. Returns the
/// maximum over coordinates of `|a − d| / max(|a|, |d|, 1e-12)`.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let v = loss_fn(&tape, &vars)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", loss.item())));
    }
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter gradient").clone();
        for k in 0..work[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
