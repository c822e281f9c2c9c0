//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded onto a [`Tape`] in forward order; [`Tape::backward`]
//! replays the tape in reverse and accumulates vector-Jacobian products. A tape
//! is single-threaded; independent tapes may run concurrently since they share
//! no state.
//!
//! The primitive set is the closure of operations the decoder stack needs:
//! matrix product and transpose, elementwise add/scale/log, ReLU and GELU,
//! row-wise softmax, layer normalization, embedding lookup, column
//! concatenation, and scalar indexing.

mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Variance stabilizer inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A differentiable primitive, together with its non-differentiable
/// attributes (scale constant, lookup ids, index position).
#[derive(Debug, Clone)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]` matrix product.
    Matmul,
    /// Rank-2 transpose.
    Transpose,
    /// Elementwise sum of two equal-shape tensors.
    Add,
    /// Multiply every element by a finite constant.
    Scale(f64),
    /// Softmax over each row of a rank-2 tensor, max-shifted for overflow.
    RowSoftmax,
    /// Elementwise natural logarithm.
    Log,
    Relu,
    /// GELU, tanh approximation.
    Gelu,
    /// Per-row normalization of `x` with broadcast `gain`/`bias` vectors;
    /// inputs are `[x, gain, bias]`.
    LayerNorm,
    /// Gather rows of a table: output row `i` is `table[ids[i]]`.
    EmbeddingLookup(Vec<usize>),
    /// Concatenate rank-2 tensors with equal row counts along columns.
    ConcatColumns,
    /// Extract the scalar at `(row, col)` of a rank-2 tensor.
    Index {
        row: usize,
        col: usize,
    },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Scale(_) => "scale",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::Log => "log",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::LayerNorm => "layer_norm",
            Primitive::EmbeddingLookup(_) => "embedding_lookup",
            Primitive::ConcatColumns => "concat_columns",
            Primitive::Index { .. } => "index",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    RowSoftmax {
        x: NodeId,
    },
    Log {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatColumns {
        parts: Vec<NodeId>,
    },
    Index {
        x: NodeId,
        row: usize,
        col: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list: recorded primitive applications in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value (parameter or constant) on the tape.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        id
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn input(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Apply a primitive to recorded inputs, record the result, and return
    /// its node. Shapes are validated against the primitive's signature and
    /// the output is checked to be finite.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let name = prim.name();
        let arity_err = |want: usize| {
            Err(Error::Contract(format!(
                "{name}: expected {want} input(s), got {}",
                inputs.len()
            )))
        };
        match prim {
            Primitive::Matmul => {
                if inputs.len() != 2 {
                    return arity_err(2);
                }
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Transpose => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.transpose(inputs[0])
            }
            Primitive::Add => {
                if inputs.len() != 2 {
                    return arity_err(2);
                }
                self.add(inputs[0], inputs[1])
            }
            Primitive::Scale(c) => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.scale(inputs[0], c)
            }
            Primitive::RowSoftmax => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.row_softmax(inputs[0])
            }
            Primitive::Log => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.log(inputs[0])
            }
            Primitive::Relu => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.relu(inputs[0])
            }
            Primitive::Gelu => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.gelu(inputs[0])
            }
            Primitive::LayerNorm => {
                if inputs.len() != 3 {
                    return arity_err(3);
                }
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            Primitive::EmbeddingLookup(ids) => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.embedding_lookup(inputs[0], &ids)
            }
            Primitive::ConcatColumns => self.concat_columns(inputs),
            Primitive::Index { row, col } => {
                if inputs.len() != 1 {
                    return arity_err(1);
                }
                self.index(inputs[0], row, col)
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.input(a), self.input(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let value = Tensor::new(vec![m, n], matmul_data(ta.data(), tb.data(), m, k, n))?;
        self.push(value, Op::Matmul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.input(x);
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose: rank-2 tensor required, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let value = Tensor::new(vec![c, r], transpose_data(t.data(), r, c))?;
        self.push(value, Op::Transpose { x }, "transpose")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.input(a), self.input(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let t = self.input(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push(value, Op::Scale { x, c }, "scale")
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.input(x);
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "row_softmax: rank-2 tensor required, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.push(value, Op::RowSoftmax { x }, "row_softmax")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.input(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.ln()).collect(),
        )
        .map_err(|_| Error::NonFinite { op: "log" })?;
        self.push(value, Op::Log { x }, "log")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.input(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        self.push(value, Op::Relu { x }, "relu")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.input(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| gelu_value(v)).collect(),
        )?;
        self.push(value, Op::Gelu { x }, "gelu")
    }

    /// Normalize each row of `x` to zero mean and unit variance (stabilized
    /// by [`LAYER_NORM_EPS`]), then apply elementwise `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.input(x), self.input(gain), self.input(bias));
        if tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1 {
            return Err(Error::Contract(format!(
                "layer_norm: need rank-2 input with rank-1 gain/bias, got {:?}/{:?}/{:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        if tg.shape()[0] != tx.cols() || tb.shape()[0] != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let (mean, inv_std) = row_moments(row);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                data[i * c + j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.push(value, Op::LayerNorm { x, gain, bias }, "layer_norm")
    }

    /// Gather rows of `table`: output row `i` equals `table[ids[i]]`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.input(table);
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "embedding_lookup: rank-2 table required, got shape {:?}",
                t.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract(
                "embedding_lookup: empty id list".to_string(),
            ));
        }
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::IdOutOfRange { id, vocab: n });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            value,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            "embedding_lookup",
        )
    }

    pub fn concat_columns(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract(
                "concat_columns: at least one input required".to_string(),
            ));
        }
        let rows = self.input(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.input(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_columns",
                    lhs: self.input(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.input(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total_cols], data)?;
        self.push(
            value,
            Op::ConcatColumns {
                parts: parts.to_vec(),
            },
            "concat_columns",
        )
    }

    /// Extract the scalar at `(row, col)` of a rank-2 tensor.
    pub fn index(&mut self, x: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let t = self.input(x);
        if t.rank() != 2 || row >= t.rows() || col >= t.cols() {
            return Err(Error::Contract(format!(
                "index: position ({row}, {col}) outside tensor of shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::scalar(t.at(row, col));
        self.push(value, Op::Index { x, row, col }, "index")
    }

    /// Reverse sweep from a scalar `loss`: returns the gradient of `loss`
    /// with respect to every node it reaches. Gradients accumulate
    /// additively at fan-out points, in tape order, so repeated backward
    /// passes over the same tape are bit-identical.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            self.pull_back(idx, &up, &mut grads);
            grads[idx] = Some(up);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .map_err(|_| Error::NonFinite { op: "backward" })
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian product of node `idx`, accumulating into its inputs.
    fn pull_back(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.input(*a), self.input(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dY . B^T
                let bt = transpose_data(tb.data(), k, n);
                accumulate(grads, *a, &matmul_data(up, &bt, m, n, k));
                // dB = A^T . dY
                let at = transpose_data(ta.data(), m, k);
                accumulate(grads, *b, &matmul_data(&at, up, k, m, n));
            }
            Op::Transpose { x } => {
                let t = self.input(*x);
                accumulate(grads, *x, &transpose_data(up, t.cols(), t.rows()));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, up);
                accumulate(grads, *b, up);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = up.iter().map(|g| g * c).collect();
                accumulate(grads, *x, &dx);
            }
            Op::RowSoftmax { x } => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let ur = &up[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(ur).map(|(yv, uv)| yv * uv).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (ur[j] - dot);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Log { x } => {
                let t = self.input(*x);
                let dx: Vec<f64> = up.iter().zip(t.data()).map(|(g, v)| g / v).collect();
                accumulate(grads, *x, &dx);
            }
            Op::Relu { x } => {
                let t = self.input(*x);
                let dx: Vec<f64> = up
                    .iter()
                    .zip(t.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Gelu { x } => {
                let t = self.input(*x);
                let dx: Vec<f64> = up
                    .iter()
                    .zip(t.data())
                    .map(|(g, &v)| g * gelu_derivative(v))
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (tx, tg) = (self.input(*x), self.input(*gain));
                let (r, c) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = tx.row(i);
                    let ur = &up[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_moments(row);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = ur.iter().zip(tg.data()).map(|(u, g)| u * g).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dgain[j] += ur[j] * xhat[j];
                        dbias[j] += ur[j];
                        dx[i * c + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gain, &dgain);
                accumulate(grads, *bias, &dbias);
            }
            Op::EmbeddingLookup { table, ids } => {
                let t = self.input(*table);
                let (n, d) = (t.rows(), t.cols());
                let mut dt = vec![0.0; n * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += up[i * d + j];
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::ConcatColumns { parts } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.input(p).cols();
                    let mut dp = vec![0.0; rows * cols];
                    for i in 0..rows {
                        dp[i * cols..(i + 1) * cols]
                            .copy_from_slice(&up[i * total + offset..i * total + offset + cols]);
                    }
                    accumulate(grads, p, &dp);
                    offset += cols;
                }
            }
            Op::Index { x, row, col } => {
                let t = self.input(*x);
                let mut dx = vec![0.0; t.numel()];
                dx[row * t.cols() + col] = up[0];
                accumulate(grads, *x, &dx);
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the node, if any of the loss reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of the node; nodes the loss does not reach get a zero
    /// tensor of their own shape.
    pub fn get_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => grads[id.0] = Some(delta.to_vec()),
    }
}

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

const GELU_CUBIC: f64 = 0.044715;

fn gelu_value(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_CUBIC * x.powi(3))).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_CUBIC * x.powi(3))).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[cfg(test)]
mod tests;
