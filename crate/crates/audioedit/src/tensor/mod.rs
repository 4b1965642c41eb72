//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set is fixed: add, sub, mul, scale, matmul, transpose, exp,
//! sqrt, sum, mean, row_softmax, relu, reshape, slice, concat,
//! squared_frobenius_norm. Every op validates shapes and rejects
//! non-finite results. A tensor participates in differentiation when it
//! was created on a [`Tape`] (directly via [`Tape::leaf`] or as the
//! result of an op with a tracked input).

mod io;
mod linalg;
mod tape;

#[cfg(test)]
mod tests;

pub use io::{read_tensor, write_tensor};
pub use linalg::{psd_sqrt, svd};
pub use tape::{Gradients, Tape};

use crate::{Error, Result};
use tape::NodeRef;

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) node: Option<NodeRef>,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(vec![0])
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        let t = Tensor {
            shape,
            data,
            node: None,
        };
        t.check_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy without tape membership.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-2, got {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    fn finish(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        make_op: impl FnOnce(Vec<usize>) -> OpKind,
    ) -> Result<Tensor> {
        let mut out = Tensor {
            shape,
            data,
            node: None,
        };
        out.check_finite(op)?;
        if let Some(tape) = tape::common_tape(inputs)? {
            let ids = inputs
                .iter()
                .map(|t| tape.intern(t))
                .collect::<Result<Vec<_>>>()?;
            let node = tape.record(out.shape.clone(), out.data.clone(), make_op(ids))?;
            out.node = Some(node);
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::finish("add", self.shape.clone(), data, &[self, other], |ids| {
            OpKind::Add(ids[0], ids[1])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::finish("sub", self.shape.clone(), data, &[self, other], |ids| {
            OpKind::Sub(ids[0], ids[1])
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor::finish("mul", self.shape.clone(), data, &[self, other], |ids| {
            OpKind::Mul(ids[0], ids[1])
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * c).collect();
        Tensor::finish("scale", self.shape.clone(), data, &[self], |ids| {
            OpKind::Scale(ids[0], c)
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, other.shape),
            });
        }
        let data = matmul_nn(&self.data, &other.data, m, k, n);
        Tensor::finish("matmul", vec![m, n], data, &[self, other], |ids| {
            OpKind::Matmul(ids[0], ids[1])
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows_cols("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::finish("transpose", vec![n, m], data, &[self], |ids| {
            OpKind::Transpose(ids[0])
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.exp()).collect();
        Tensor::finish("exp", self.shape.clone(), data, &[self], |ids| {
            OpKind::Exp(ids[0])
        })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.sqrt()).collect();
        Tensor::finish("sqrt", self.shape.clone(), data, &[self], |ids| {
            OpKind::Sqrt(ids[0])
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        Tensor::finish("sum", vec![], vec![s], &[self], |ids| OpKind::Sum(ids[0]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        let n = self.data.len() as f64;
        Tensor::finish("mean", vec![], vec![s / n], &[self], |ids| {
            OpKind::Mean(ids[0])
        })
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn row_softmax(&self) -> Result<Tensor> {
        let cols = match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "row_softmax",
                    detail: format!("expected rank 1 or 2, got {:?}", self.shape),
                })
            }
        };
        if cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "row_softmax",
                detail: "empty rows".into(),
            });
        }
        let mut data = vec![0.0; self.data.len()];
        for (out, row) in data.chunks_mut(cols).zip(self.data.chunks(cols)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        Tensor::finish("row_softmax", self.shape.clone(), data, &[self], |ids| {
            OpKind::RowSoftmax(ids[0])
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.max(0.0)).collect();
        Tensor::finish("relu", self.shape.clone(), data, &[self], |ids| {
            OpKind::Relu(ids[0])
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Tensor::finish("reshape", shape, self.data.clone(), &[self], |ids| {
            OpKind::Reshape(ids[0])
        })
    }

    /// Slice `start..end` along axis 0.
    pub fn slice(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start >= end || end > self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("{}..{} of {:?}", start, end, self.shape),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let data = self.data[start * stride..end * stride].to_vec();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::finish("slice", shape, data, &[self], |ids| OpKind::Slice {
            input: ids[0],
            start,
        })
    }

    /// Concatenate along axis 0.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs [_, {:?}]", p.shape, tail),
                });
            }
            rows += p.shape[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Tensor::finish("concat", shape, data, parts, OpKind::Concat)
    }

    /// Sum of squared entries, as a scalar tensor.
    pub fn squared_frobenius_norm(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().map(|a| a * a).sum();
        Tensor::finish("squared_frobenius_norm", vec![], vec![s], &[self], |ids| {
            OpKind::SqFrob(ids[0])
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum OpKind {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    RowSoftmax(usize),
    Relu(usize),
    Reshape(usize),
    Slice { input: usize, start: usize },
    Concat(Vec<usize>),
    SqFrob(usize),
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// a (m x k) times b^T where b is (n x k).
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// a^T times b where a is (k x m), b is (k x n).
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}
