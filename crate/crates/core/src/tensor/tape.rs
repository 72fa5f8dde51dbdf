use std::collections::HashMap;

use super::kernels;
use super::{ParamId, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Column(Var, usize),
    RowMean(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    BceWithLogits(Var, Vec<f64>),
    Gather {
        param: ParamId,
        rows: usize,
        indices: Vec<usize>,
    },
    BagMean {
        param: ParamId,
        rows: usize,
        bags: Vec<Vec<usize>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Input | Op::Param(_) | Op::Gather { .. } | Op::BagMean { .. } => {
                vec![]
            }
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Column(a, _)
            | Op::RowMean(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::BceWithLogits(a, _) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass; [`Tape::backward`] replays it in reverse.
///
/// Frozen parameters are recorded as constants, so no gradient is ever
/// produced for them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass: per-node gradients plus per-parameter totals.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<f64>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a recorded value, if it was reachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) | Op::Gather { .. } | Op::BagMean { .. } => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// A free leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Registers a parameter; repeated registration returns the same handle.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if p.is_frozen() {
            return self.constant(p.value().clone());
        }
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Param(p.id()));
        self.params.insert(p.id(), v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `M[.., j, k] = Σ_i x[.., i] · W[i, j, k]` for `x: [d_s]` or `[B, d_s]`
    /// and `W: [d_s, d_m, d_e]`.
    pub fn contract3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ok = sw.len() == 3 && matches!(sx.len(), 1 | 2) && sx[sx.len() - 1] == sw[0];
        if !ok {
            return Err(Error::shape("contract3", &sx, &sw));
        }
        let (d_m, d_e) = (sw[1], sw[2]);
        let batch = if sx.len() == 2 { sx[0] } else { 1 };
        let x2 = self.reshape(x, &[batch, sw[0]])?;
        let w2 = self.reshape(w, &[sw[0], d_m * d_e])?;
        let m = self.matmul(x2, w2)?;
        if sx.len() == 1 {
            self.reshape(m, &[d_m, d_e])
        } else {
            self.reshape(m, &[batch, d_m, d_e])
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-n bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_row", sa, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let shape = sa.to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Concatenates `[m, n_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a)))
    }

    /// Column `j` of an `[m, n]` matrix, as a length-m vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || j >= s[1] {
            return Err(Error::shape("column", s, &[j]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let data = (0..m).map(|i| src[i * n + j]).collect();
        Ok(self.push(Tensor::from_parts(vec![m], data), Op::Column(a, j)))
    }

    /// Mean over each row of an `[m, n]` matrix.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("row_mean", s, &[]));
        }
        let n = s[1];
        let m = s[0];
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![m], data), Op::RowMean(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("softmax_rows", s, &[]));
        }
        let n = s[1];
        let shape = s.to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::SoftmaxRows(a)))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum();
        let t = targets.data().to_vec();
        Ok(self.push(Tensor::scalar(total / n), Op::BceWithLogits(logits, t)))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse_loss", self.shape(pred), self.shape(target)));
        }
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Divergence between an answer and a hidden state: mean squared difference.
    pub fn l2_divergence(&mut self, a: Var, h: Var) -> Result<Var> {
        if self.shape(a) != self.shape(h) {
            return Err(Error::shape("l2_divergence", self.shape(a), self.shape(h)));
        }
        let d = self.sub(a, h)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Per-row mean squared difference of two `[m, n]` matrices.
    pub fn row_l2_divergence(&mut self, a: Var, h: Var) -> Result<Var> {
        if self.shape(a) != self.shape(h) || self.shape(a).len() != 2 {
            return Err(Error::shape("row_l2_divergence", self.shape(a), self.shape(h)));
        }
        let d = self.sub(a, h)?;
        let sq = self.square(d);
        self.row_mean(sq)
    }

    /// Gathers `table` rows; gradient scatters back into those rows.
    pub fn embedding_lookup(&mut self, table: &Parameter, indices: &[usize]) -> Result<Var> {
        let (rows, dim) = table_dims(table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfVocab {
                field: "embedding",
                index: bad,
                vocab: rows,
            });
        }
        let src = table.value().data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(vec![indices.len(), dim], data)?;
        Ok(if table.is_frozen() {
            self.constant(value)
        } else {
            let op = Op::Gather {
                param: table.id(),
                rows,
                indices: indices.to_vec(),
            };
            self.push(value, op)
        })
    }

    /// Mean of the gathered rows for each bag; an empty bag yields zeros.
    pub fn embedding_bag_mean(&mut self, table: &Parameter, bags: &[Vec<usize>]) -> Result<Var> {
        let (rows, dim) = table_dims(table)?;
        let src = table.value().data();
        let mut data = vec![0.0; bags.len() * dim];
        for (b, bag) in bags.iter().enumerate() {
            if let Some(&bad) = bag.iter().find(|&&i| i >= rows) {
                return Err(Error::OutOfVocab {
                    field: "token bucket",
                    index: bad,
                    vocab: rows,
                });
            }
            if bag.is_empty() {
                continue;
            }
            let out = &mut data[b * dim..(b + 1) * dim];
            for &i in bag {
                out.iter_mut()
                    .zip(&src[i * dim..(i + 1) * dim])
                    .for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / bag.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![bags.len(), dim], data)?;
        Ok(if table.is_frozen() {
            self.constant(value)
        } else {
            let op = Op::BagMean {
                param: table.id(),
                rows,
                bags: bags.to_vec(),
            };
            self.push(value, op)
        })
    }

    /// Replays the tape in reverse from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params: HashMap<ParamId, Vec<f64>> = HashMap::new();
        let mut visited = Vec::new();
        if !root.needs_grad {
            return Ok(Gradients {
                nodes: grads,
                params,
                visited,
            });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            self.propagate(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
            visited,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut HashMap<ParamId, Vec<f64>>,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::Param(id) => {
                let acc = params.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                add_into(acc, g);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let acc = slot(grads, *a, m * k);
                    kernels::acc_grad_lhs(acc, g, val(*b), m, k, n);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, k * n);
                    kernels::acc_grad_rhs(acc, val(*a), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    acc.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b);
                    let acc = slot(grads, *a, g.len());
                    for ((o, d), y) in acc.iter_mut().zip(g).zip(other) {
                        *o += d * y;
                    }
                }
                if wants(*b) {
                    let other = val(*a);
                    let acc = slot(grads, *b, g.len());
                    for ((o, d), x) in acc.iter_mut().zip(g).zip(other) {
                        *o += d * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let acc = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(acc, row);
                    }
                }
            }
            Op::Scale(a, c) => {
                let acc = slot(grads, *a, g.len());
                acc.iter_mut().zip(g).for_each(|(o, d)| *o += d * c);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let acc = slot(grads, *a, g.len());
                for ((o, d), xv) in acc.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *o += d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let acc = slot(grads, *a, g.len());
                for ((o, d), s) in acc.iter_mut().zip(g).zip(y) {
                    *o += d * s * (1.0 - s);
                }
            }
            Op::Square(a) => {
                let x = val(*a);
                let acc = slot(grads, *a, g.len());
                for ((o, d), xv) in acc.iter_mut().zip(g).zip(x) {
                    *o += 2.0 * d * xv;
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if wants(p) {
                        let acc = slot(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut acc[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let acc = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        acc[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Column(a, j) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let acc = slot(grads, *a, m * n);
                for i in 0..m {
                    acc[i * n + j] += g[i];
                }
            }
            Op::RowMean(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                let acc = slot(grads, *a, m * n);
                let inv = 1.0 / n as f64;
                for (row, d) in acc.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|o| *o += d * inv);
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                slot(grads, *a, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let d = g[0] / n as f64;
                slot(grads, *a, n).iter_mut().for_each(|o| *o += d);
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let acc = slot(grads, *a, g.len());
                for ((o_row, y_row), g_row) in acc.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in o_row.iter_mut().zip(y_row).zip(g_row) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::BceWithLogits(a, targets) => {
                let z = val(*a);
                let scale = g[0] / z.len() as f64;
                let acc = slot(grads, *a, z.len());
                for ((o, zv), t) in acc.iter_mut().zip(z).zip(targets) {
                    *o += scale * (sigmoid(*zv) - t);
                }
            }
            Op::Gather {
                param,
                rows,
                indices,
            } => {
                let dim = node.value.shape()[1];
                let acc = params.entry(*param).or_insert_with(|| vec![0.0; rows * dim]);
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut acc[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
            Op::BagMean { param, rows, bags } => {
                let dim = node.value.shape()[1];
                let acc = params.entry(*param).or_insert_with(|| vec![0.0; rows * dim]);
                for (b, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / bag.len() as f64;
                    let gb = &g[b * dim..(b + 1) * dim];
                    for &i in bag {
                        acc[i * dim..(i + 1) * dim]
                            .iter_mut()
                            .zip(gb)
                            .for_each(|(o, d)| *o += d * inv);
                    }
                }
            }
        }
    }
}

fn table_dims(table: &Parameter) -> Result<(usize, usize)> {
    match table.shape() {
        [rows, dim] => Ok((*rows, *dim)),
        other => Err(Error::shape("embedding table", other, &[])),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(o, d)| *o += d);
}

/// Logistic function, kept strictly inside (0, 1) where f64 would round to
/// an endpoint.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
