//! Dense row-major `f64` tensors and the kernels shared by the tape and
//! by tape-free inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array. Most kernels operate on rank-2 tensors; scalars
/// are `[1, 1]` and row vectors are `[1, m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rank-2 tensor expected");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2, "rank-2 tensor expected");
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        assert!(start <= end && end <= self.rows(), "row range out of bounds");
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Gather the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row_slice(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Stack rank-2 tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("vstack of zero tensors".into()));
        };
        let c = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(Error::Shape(format!(
                    "vstack column mismatch: {} vs {}",
                    c,
                    p.cols()
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Add a `[1, m]` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        let m = self.cols();
        assert_eq!(row.len(), m, "row broadcast width mismatch");
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums as a `[1, m]` row.
    pub fn sum_rows(&self) -> Tensor {
        let m = self.cols();
        let mut out = vec![0.0; m];
        for chunk in self.data.chunks(m) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::row(out)
    }

    pub fn mean_rows(&self) -> Tensor {
        let n = self.rows() as f64;
        self.sum_rows().map(|v| v / n)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let m = self.cols();
        let mut out = self.data.clone();
        if m == 0 {
            return Tensor {
                shape: self.shape.clone(),
                data: out,
            };
        }
        for chunk in out.chunks_mut(m) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in chunk.iter_mut() {
                *v /= z;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Per-row `-log softmax(row)[label]`.
    pub fn cross_entropy_rows(&self, labels: &[usize]) -> Vec<f64> {
        let m = self.cols();
        assert_eq!(labels.len(), self.rows(), "one label per row");
        self.data
            .chunks(m)
            .zip(labels)
            .map(|(row, &y)| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                lse - row[y]
            })
            .collect()
    }

    /// Row-wise outer product: row `i` of the result is `a_i ⊗ b_i`
    /// flattened row-major (index `h * b.cols() + c`).
    pub fn row_outer(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, h) = (a.rows(), a.cols());
        let c = b.cols();
        assert_eq!(n, b.rows(), "row_outer row mismatch");
        let mut out = Vec::with_capacity(n * h * c);
        for i in 0..n {
            let ar = a.row_slice(i);
            let br = b.row_slice(i);
            for &x in ar {
                out.extend(br.iter().map(|&y| x * y));
            }
        }
        Tensor {
            shape: vec![n, h * c],
            data: out,
        }
    }

    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
        let n = a.rows();
        assert_eq!(n, b.rows(), "concat_cols row mismatch");
        let (ca, cb) = (a.cols(), b.cols());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(a.row_slice(i));
            out.extend_from_slice(b.row_slice(i));
        }
        Tensor {
            shape: vec![n, ca + cb],
            data: out,
        }
    }

    /// Argmax per row, ties broken toward the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let m = self.cols();
        if m == 0 {
            return vec![0; self.rows()];
        }
        self.data
            .chunks(m)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
