//! Reverse-mode gradient tape.
//!
//! The tape records a small fixed set of primitives (matrix-vector product,
//! add, elementwise mul, tanh, mean, cosine, log-softmax plus slicing and
//! concatenation glue) and replays them backward to produce gradients for
//! every registered parameter. Nodes are appended in topological order, so a
//! single reverse sweep visits each node exactly once. All reductions sum
//! left to right, which keeps runs bit-reproducible on one platform.

use std::collections::BTreeMap;

use super::tensor::{Tensor, ZERO_NORM_THRESHOLD};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Add(usize, usize),
    Mul(usize, usize),
    MatVec { matrix: usize, vector: usize },
    Tanh(usize),
    Mean(usize),
    Cosine(usize, usize),
    LogSoftmax(usize),
    Scale { input: usize, factor: f64 },
    Index { input: usize, index: usize },
    Slice { input: usize, offset: usize },
    Concat { inputs: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Value computed at `node`.
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    /// Scalar value at `node`.
    pub fn scalar_value(&self, node: NodeId) -> Result<f64, NumericsError> {
        self.nodes[node.0].value.item()
    }

    /// Records a constant; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Registers a named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, NumericsError> {
        if self.params.contains_key(name) {
            return Err(NumericsError::DuplicateParameter {
                name: name.to_string(),
            });
        }
        let id = self.push(value, Op::Param);
        self.params.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    /// `matrix` is `[m, n]` row-major, `vector` is `[n]`; result is `[m]`.
    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId, NumericsError> {
        let m_shape = self.nodes[matrix.0].value.shape().to_vec();
        let v_shape = self.nodes[vector.0].value.shape().to_vec();
        if m_shape.len() != 2 || v_shape.len() != 1 || m_shape[1] != v_shape[0] {
            return Err(NumericsError::ShapeMismatch {
                expected: m_shape,
                actual: v_shape,
            });
        }
        let (rows, cols) = (m_shape[0], m_shape[1]);
        let w = self.nodes[matrix.0].value.data();
        let x = self.nodes[vector.0].value.data();
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += w[i * cols + j] * x[j];
            }
            out[i] = acc;
        }
        let value = Tensor::from_raw(vec![rows], out);
        Ok(self.push(value, Op::MatVec { matrix: matrix.0, vector: vector.0 }))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::from_raw(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().iter().map(|v| v.tanh()).collect(),
        );
        self.push(value, Op::Tanh(a.0))
    }

    /// Mean of all entries; result is scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(NumericsError::EmptyInput);
        }
        let sum: f64 = self.nodes[a.0].value.data().iter().sum();
        let value = Tensor::from_raw(vec![], vec![sum / n as f64]);
        Ok(self.push(value, Op::Mean(a.0)))
    }

    /// Cosine similarity of two vectors; result is scalar.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.len() != vb.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: va.shape().to_vec(),
                actual: vb.shape().to_vec(),
            });
        }
        let na = va.l2_norm();
        let nb = vb.l2_norm();
        if na <= ZERO_NORM_THRESHOLD || nb <= ZERO_NORM_THRESHOLD {
            return Err(NumericsError::ZeroNorm);
        }
        let dot: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let value = Tensor::from_raw(vec![], vec![dot / (na * nb)]);
        Ok(self.push(value, Op::Cosine(a.0, b.0)))
    }

    /// Log-softmax over a rank-1 logits node.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 1 || v.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![v.len().max(1)],
                actual: v.shape().to_vec(),
            });
        }
        let out = super::tensor::log_softmax(v.data());
        let value = Tensor::from_raw(v.shape().to_vec(), out);
        Ok(self.push(value, Op::LogSoftmax(a.0)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(factor);
        self.push(value, Op::Scale { input: a.0, factor })
    }

    /// Picks entry `index` from a node's flattened buffer; result is scalar.
    pub fn index(&mut self, a: NodeId, index: usize) -> Result<NodeId, NumericsError> {
        let v = &self.nodes[a.0].value;
        if index >= v.len() {
            return Err(NumericsError::IndexOutOfRange { index, len: v.len() });
        }
        let value = Tensor::from_raw(vec![], vec![v.data()[index]]);
        Ok(self.push(value, Op::Index { input: a.0, index }))
    }

    /// Contiguous range of a node's flattened buffer under `shape`.
    pub fn slice(
        &mut self,
        a: NodeId,
        offset: usize,
        shape: Vec<usize>,
    ) -> Result<NodeId, NumericsError> {
        let value = self.nodes[a.0].value.slice(offset, shape)?;
        Ok(self.push(value, Op::Slice { input: a.0, offset }))
    }

    /// Flattened concatenation of the inputs under `shape`.
    pub fn concat(&mut self, parts: &[NodeId], shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.len()).sum();
        if shape.iter().product::<usize>() != total {
            return Err(NumericsError::ShapeMismatch {
                expected: shape,
                actual: vec![total],
            });
        }
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = Tensor::from_raw(shape, data);
        Ok(self.push(value, Op::Concat { inputs: parts.iter().map(|p| p.0).collect() }))
    }

    /// Stacks scalar nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, scalars: &[NodeId]) -> Result<NodeId, NumericsError> {
        for s in scalars {
            if !self.nodes[s.0].value.is_scalar() {
                return Err(NumericsError::NotScalar {
                    shape: self.nodes[s.0].value.shape().to_vec(),
                });
            }
        }
        self.concat(scalars, vec![scalars.len()])
    }

    /// `-log softmax(logits)[target]` as a composite of primitives.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        target: usize,
    ) -> Result<NodeId, NumericsError> {
        let log_probs = self.log_softmax(logits)?;
        let picked = self.index(log_probs, target)?;
        Ok(self.scale(picked, -1.0))
    }

    /// Runs the reverse sweep from a scalar `loss` node.
    ///
    /// The returned map holds a gradient for every registered parameter that
    /// is reachable from the loss; parameters with no path to the loss are
    /// absent (query them with [`GradientMap::get_or_zero`]).
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap, NumericsError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(adj) = adjoints[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Constant | Op::Param => {
                    // Leaves: keep the adjoint for parameter collection.
                    adjoints[i] = Some(adj);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, self.nodes[*a].value.len(), |buf| {
                        for (d, g) in buf.iter_mut().zip(&adj) {
                            *d += g;
                        }
                    });
                    accumulate(&mut adjoints, *b, self.nodes[*b].value.len(), |buf| {
                        for (d, g) in buf.iter_mut().zip(&adj) {
                            *d += g;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[*a].value.data();
                    let vb = self.nodes[*b].value.data();
                    accumulate(&mut adjoints, *a, va.len(), |buf| {
                        for ((d, g), w) in buf.iter_mut().zip(&adj).zip(vb) {
                            *d += g * w;
                        }
                    });
                    accumulate(&mut adjoints, *b, vb.len(), |buf| {
                        for ((d, g), w) in buf.iter_mut().zip(&adj).zip(va) {
                            *d += g * w;
                        }
                    });
                }
                Op::MatVec { matrix, vector } => {
                    let w = self.nodes[*matrix].value.data();
                    let x = self.nodes[*vector].value.data();
                    let rows = self.nodes[i].value.len();
                    let cols = x.len();
                    accumulate(&mut adjoints, *matrix, rows * cols, |buf| {
                        for (r, g) in adj.iter().enumerate() {
                            for (c, xv) in x.iter().enumerate() {
                                buf[r * cols + c] += g * xv;
                            }
                        }
                    });
                    accumulate(&mut adjoints, *vector, cols, |buf| {
                        for c in 0..cols {
                            let mut acc = 0.0;
                            for (r, g) in adj.iter().enumerate() {
                                acc += g * w[r * cols + c];
                            }
                            buf[c] += acc;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.data();
                    accumulate(&mut adjoints, *a, y.len(), |buf| {
                        for ((d, g), yv) in buf.iter_mut().zip(&adj).zip(y) {
                            *d += g * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len();
                    let g = adj[0] / n as f64;
                    accumulate(&mut adjoints, *a, n, |buf| {
                        for d in buf.iter_mut() {
                            *d += g;
                        }
                    });
                }
                Op::Cosine(a, b) => {
                    let va = self.nodes[*a].value.data();
                    let vb = self.nodes[*b].value.data();
                    let na = self.nodes[*a].value.l2_norm();
                    let nb = self.nodes[*b].value.l2_norm();
                    let cos = self.nodes[i].value.data()[0];
                    let g = adj[0];
                    accumulate(&mut adjoints, *a, va.len(), |buf| {
                        for k in 0..va.len() {
                            buf[k] += g * (vb[k] / (na * nb) - cos * va[k] / (na * na));
                        }
                    });
                    accumulate(&mut adjoints, *b, vb.len(), |buf| {
                        for k in 0..vb.len() {
                            buf[k] += g * (va[k] / (na * nb) - cos * vb[k] / (nb * nb));
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = self.nodes[i].value.data();
                    let g_sum: f64 = adj.iter().sum();
                    accumulate(&mut adjoints, *a, y.len(), |buf| {
                        for ((d, g), yv) in buf.iter_mut().zip(&adj).zip(y) {
                            *d += g - yv.exp() * g_sum;
                        }
                    });
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    accumulate(&mut adjoints, *input, self.nodes[*input].value.len(), |buf| {
                        for (d, g) in buf.iter_mut().zip(&adj) {
                            *d += g * f;
                        }
                    });
                }
                Op::Index { input, index } => {
                    let g = adj[0];
                    let idx = *index;
                    accumulate(&mut adjoints, *input, self.nodes[*input].value.len(), |buf| {
                        buf[idx] += g;
                    });
                }
                Op::Slice { input, offset } => {
                    let off = *offset;
                    accumulate(&mut adjoints, *input, self.nodes[*input].value.len(), |buf| {
                        for (k, g) in adj.iter().enumerate() {
                            buf[off + k] += g;
                        }
                    });
                }
                Op::Concat { inputs } => {
                    let mut cursor = 0;
                    for part in inputs.clone() {
                        let len = self.nodes[part].value.len();
                        let segment = adj[cursor..cursor + len].to_vec();
                        accumulate(&mut adjoints, part, len, |buf| {
                            for (d, g) in buf.iter_mut().zip(&segment) {
                                *d += g;
                            }
                        });
                        cursor += len;
                    }
                }
            }
        }

        let mut grads = BTreeMap::new();
        let mut registered = BTreeMap::new();
        for (name, &idx) in &self.params {
            registered.insert(name.clone(), self.nodes[idx].value.shape().to_vec());
            if let Some(adj) = &adjoints[idx] {
                let shape = self.nodes[idx].value.shape().to_vec();
                grads.insert(name.clone(), Tensor::from_raw(shape, adj.clone()));
            }
        }
        Ok(GradientMap { grads, registered })
    }
}

fn accumulate<F>(adjoints: &mut [Option<Vec<f64>>], target: usize, len: usize, write: F)
where
    F: FnOnce(&mut Vec<f64>),
{
    let slot = adjoints[target].get_or_insert_with(|| vec![0.0; len]);
    write(slot);
}

/// Gradients produced by one backward sweep, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
    registered: BTreeMap<String, Vec<usize>>,
}

impl GradientMap {
    /// True when gradient actually flowed into `name`.
    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Gradient for `name`, failing with `DisconnectedParameter` when the
    /// parameter received no gradient flow.
    pub fn require(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.grads
            .get(name)
            .ok_or_else(|| NumericsError::DisconnectedParameter {
                name: name.to_string(),
            })
    }

    /// Gradient for `name`, with a zero tensor standing in when the loss does
    /// not depend on the parameter. Unregistered names are an error.
    pub fn get_or_zero(&self, name: &str) -> Result<Tensor, NumericsError> {
        if let Some(g) = self.grads.get(name) {
            return Ok(g.clone());
        }
        match self.registered.get(name) {
            Some(shape) => Ok(Tensor::zeros(shape.clone())),
            None => Err(NumericsError::DisconnectedParameter {
                name: name.to_string(),
            }),
        }
    }

    /// Names that received gradient, in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
