//! Differentiation tape: records ops in creation order, replays their
//! adjoints once. A tape is backward-once; building another graph needs
//! a fresh tape.

use std::cell::RefCell;
use std::rc::Rc;

use super::{matmul_nt, matmul_tn, OpKind, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Debug)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: OpKind,
}

#[derive(Debug, Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked copy of `t`, registered as a leaf.
    pub fn leaf(&self, t: &Tensor) -> Result<Tensor> {
        let node = self.record(t.shape().to_vec(), t.data().to_vec(), OpKind::Leaf)?;
        Ok(Tensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            node: Some(node),
        })
    }

    pub(crate) fn record(&self, shape: Vec<usize>, data: Vec<f64>, op: OpKind) -> Result<NodeRef> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.nodes.push(Node { shape, data, op });
        Ok(NodeRef {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        })
    }

    /// Node id of `t` on this tape; untracked inputs become constant leaves.
    pub(crate) fn intern(&self, t: &Tensor) -> Result<usize> {
        match &t.node {
            Some(r) if r.tape.same_as(self) => Ok(r.id),
            Some(_) => Err(Error::CrossTape),
            None => Ok(self
                .record(t.shape().to_vec(), t.data().to_vec(), OpKind::Leaf)?
                .id),
        }
    }
}

/// Tape shared by the tracked inputs, if any. Mixing tapes is an error.
pub(crate) fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(r) = &t.node {
            match &found {
                None => found = Some(r.tape.clone()),
                Some(f) if f.same_as(&r.tape) => {}
                Some(_) => return Err(Error::CrossTape),
            }
        }
    }
    Ok(found)
}

pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked tensor; zero if the loss
    /// does not depend on it.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let node = t.node.as_ref().ok_or(Error::DetachedLoss)?;
        if !node.tape.same_as(&self.tape) {
            return Err(Error::CrossTape);
        }
        match &self.grads[node.id] {
            Some(g) => Tensor::new(t.shape().to_vec(), g.clone()),
            None => Ok(Tensor::zeros(t.shape().to_vec())),
        }
    }
}

impl Tensor {
    /// Reverse-mode sweep from a scalar loss. Consumes the tape: further
    /// recording or a second backward on it fails.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 || !self.shape().is_empty() && self.shape() != [1] {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        let node = self.node.as_ref().ok_or(Error::DetachedLoss)?;
        let tape = node.tape.clone();
        let loss_id = node.id;
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &nodes[id].op {
                OpKind::Leaf => {}
                OpKind::Add(a, b) => {
                    axpy(&mut grads, *a, nodes[*a].data.len(), &g, 1.0);
                    axpy(&mut grads, *b, nodes[*b].data.len(), &g, 1.0);
                }
                OpKind::Sub(a, b) => {
                    axpy(&mut grads, *a, nodes[*a].data.len(), &g, 1.0);
                    axpy(&mut grads, *b, nodes[*b].data.len(), &g, -1.0);
                }
                OpKind::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(&nodes[*b].data).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(&nodes[*a].data).map(|(x, y)| x * y).collect();
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                    axpy(&mut grads, *b, db.len(), &db, 1.0);
                }
                OpKind::Scale(a, c) => {
                    axpy(&mut grads, *a, nodes[*a].data.len(), &g, *c);
                }
                OpKind::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let da = matmul_nt(&g, &nodes[*b].data, m, n, k);
                    let db = matmul_tn(&nodes[*a].data, &g, k, m, n);
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                    axpy(&mut grads, *b, db.len(), &db, 1.0);
                }
                OpKind::Transpose(a) => {
                    let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                }
                OpKind::Exp(a) => {
                    let out = &nodes[id].data;
                    let da: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * y).collect();
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                }
                OpKind::Sqrt(a) => {
                    let out = &nodes[id].data;
                    let da: Vec<f64> = g.iter().zip(out).map(|(x, y)| 0.5 * x / y).collect();
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                }
                OpKind::Sum(a) => {
                    let len = nodes[*a].data.len();
                    let da = vec![g[0]; len];
                    axpy(&mut grads, *a, len, &da, 1.0);
                }
                OpKind::Mean(a) => {
                    let len = nodes[*a].data.len();
                    let da = vec![g[0] / len as f64; len];
                    axpy(&mut grads, *a, len, &da, 1.0);
                }
                OpKind::RowSoftmax(a) => {
                    let out = &nodes[id].data;
                    let shape = &nodes[id].shape;
                    let cols = *shape.last().unwrap();
                    let mut da = vec![0.0; out.len()];
                    for r in 0..out.len() / cols {
                        let s = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            da[r * cols + j] = s[j] * (gr[j] - dot);
                        }
                    }
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                }
                OpKind::Relu(a) => {
                    let input = &nodes[*a].data;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(input)
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect();
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                }
                OpKind::Reshape(a) => {
                    axpy(&mut grads, *a, nodes[*a].data.len(), &g, 1.0);
                }
                OpKind::Slice { input, start } => {
                    let in_len = nodes[*input].data.len();
                    let stride: usize = nodes[*input].shape[1..].iter().product();
                    let acc = entry(&mut grads, *input, in_len);
                    for (i, v) in g.iter().enumerate() {
                        acc[start * stride + i] += v;
                    }
                }
                OpKind::Concat(ids) => {
                    let mut offset = 0;
                    for a in ids {
                        let len = nodes[*a].data.len();
                        axpy(&mut grads, *a, len, &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                OpKind::SqFrob(a) => {
                    let input = &nodes[*a].data;
                    let da: Vec<f64> = input.iter().map(|v| 2.0 * g[0] * v).collect();
                    axpy(&mut grads, *a, da.len(), &da, 1.0);
                }
            }
        }

        drop(inner);
        Ok(Gradients { tape, grads })
    }
}

fn entry(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, g: &[f64], c: f64) {
    let acc = entry(grads, id, len);
    for (a, v) in acc.iter_mut().zip(g) {
        *a += c * v;
    }
}
