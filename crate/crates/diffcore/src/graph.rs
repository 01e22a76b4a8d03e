//! The tape: an append-only list of nodes, each holding its forward value and
//! the op that produced it. Nodes are only ever appended after their inputs, so
//! iterating the list backwards is a valid reverse topological order.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::fault;
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op identity, used for fault injection and verification reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Pow,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Softmax,
    LayerNorm,
    Gelu,
    Embedding,
    CrossEntropy,
    Sum,
    Mean,
    SumAxis,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Pow,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Embedding,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Pow => "pow",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Embedding => "embedding",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the right operand of a binary op is broadcast onto the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// rhs is one row of width `cols`, repeated down every row of lhs.
    Row,
    /// rhs is one column of height `rows`, repeated across every column of lhs.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bc: Bcast, cols: usize },
    Mul { a: Var, b: Var, bc: Bcast, cols: usize },
    Scale { a: Var, c: f64 },
    Pow { a: Var, p: f64 },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
}

struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single-writer tape. Build it during one forward pass, call
/// [`Graph::backward`] once, read gradients, drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(dims: &[usize]) -> (usize, usize) {
    match dims.len() {
        1 => (1, dims[0]),
        2 => (dims[0], dims[1]),
        _ => {
            let cols = *dims.last().unwrap();
            (dims.iter().product::<usize>() / cols, cols)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant_from(&mut self, dims: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid(format!(
                "constant dims {dims:?} vs {} values",
                data.len()
            )));
        }
        Ok(self.push(dims, data, Op::Leaf, false))
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.node(v).dims
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Copies a node's value (and gradient, when present) out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let mut t = Tensor::new(n.dims.clone(), n.value.clone()).expect("node dims");
        t.set_grad(n.grad.clone()).expect("grad dims");
        t
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(TensorError::shape("matmul", da, db));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        let (rows, cols) = rows_cols(da);
        if da == db {
            Ok((Bcast::Same, cols))
        } else if self.node(b).value.len() == 1 {
            Ok((Bcast::Scalar, cols))
        } else if da.len() == 2 && (db == [cols] || db == [1, cols]) {
            Ok((Bcast::Row, cols))
        } else if da.len() == 2 && db == [rows, 1] {
            Ok((Bcast::Col, cols))
        } else {
            Err(TensorError::shape(op, da, db))
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let (bc, cols) = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let out: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % cols]))
                .collect(),
            Bcast::Col => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i / cols]))
                .collect(),
        };
        let dims = self.dims(a).to_vec();
        let rg = self.rg(&[a, b]);
        let op = if mul {
            Op::Mul { a, b, bc, cols }
        } else {
            Op::Add { a, b, bc, cols }
        };
        Ok(self.push(dims, out, op, rg))
    }

    /// Elementwise sum. `b` may be equal-shaped, a scalar, a row `[n]`/`[1,n]`
    /// or a column `[m,1]` of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(dims, out, Op::Scale { a, c }, rg)
    }

    /// Elementwise power. Errors when the result is not finite.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.powf(p)).collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::Contract(format!(
                "pow({p}) produced a non-finite value"
            )));
        }
        let dims = self.dims(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(dims, out, Op::Pow { a, p }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a);
        if d.len() != 2 {
            return Err(TensorError::shape("transpose", d, &[]));
        }
        let (rows, cols) = (d[0], d[1]);
        let out = kernels::transpose(self.value(a), rows, cols);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(a).len() || dims.contains(&0) {
            return Err(TensorError::shape("reshape", self.dims(a), dims));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(dims.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        if axis > 1 {
            return Err(TensorError::Invalid(format!("concat axis {axis}")));
        }
        let d0 = self.dims(first).to_vec();
        if d0.len() != 2 {
            return Err(TensorError::shape("concat", &d0, &[]));
        }
        let other = 1 - axis;
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[other] != d0[other] {
                return Err(TensorError::shape("concat", &d0, d));
            }
            total += d[axis];
        }
        let out = if axis == 0 {
            let mut out = Vec::with_capacity(total * d0[1]);
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
            out
        } else {
            let rows = d0[0];
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    let c = self.dims(p)[1];
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
            out
        };
        let dims = if axis == 0 {
            vec![total, d0[1]]
        } else {
            vec![d0[0], total]
        };
        let rg = self.rg(parts);
        Ok(self.push(
            dims,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start+len` along `axis` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if d.len() != 2 || axis > 1 || len == 0 || start + len > d[axis] {
            return Err(TensorError::Invalid(format!(
                "slice axis {axis} range {start}..{} of {d:?}",
                start + len
            )));
        }
        let v = self.value(a);
        let (out, dims) = if axis == 0 {
            (v[start * d[1]..(start + len) * d[1]].to_vec(), vec![len, d[1]])
        } else {
            let mut out = Vec::with_capacity(d[0] * len);
            for r in 0..d[0] {
                out.extend_from_slice(&v[r * d[1] + start..r * d[1] + start + len]);
            }
            (out, vec![d[0], len])
        };
        let rg = self.rg(&[a]);
        Ok(self.push(dims, out, Op::Slice { a, axis, start }, rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = *self.dims(a).last().unwrap();
        let out = kernels::softmax_rows(self.value(a), cols);
        let dims = self.dims(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(dims, out, Op::Softmax { a, cols }, rg)
    }

    /// Softmax along `axis` of a 2-D tensor.
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax(a)),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax(t);
                self.transpose(s)
            }
            _ => Err(TensorError::Invalid(format!("softmax axis {axis}"))),
        }
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = *self.dims(x).last().unwrap();
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(TensorError::shape("layer_norm", self.dims(x), self.dims(p)));
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / cols;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let dims = self.dims(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            dims,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(dims, out, Op::Gelu { a }, rg)
    }

    /// Gathers rows of a 2-D `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let d = self.dims(table).to_vec();
        if d.len() != 2 {
            return Err(TensorError::shape("embedding", &d, &[]));
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding lookup of no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= d[0]) {
            return Err(TensorError::Invalid(format!(
                "embedding id {bad} out of range {}",
                d[0]
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d[1]);
        for &i in ids {
            out.extend_from_slice(&tv[i * d[1]..(i + 1) * d[1]]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d[1]],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target
    /// class. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.dims(logits));
        if targets.len() != rows {
            return Err(TensorError::shape(
                "cross_entropy",
                self.dims(logits),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::Invalid(format!(
                "target class {bad} out of range {cols}"
            )));
        }
        let lv = self.value(logits);
        let probs = kernels::softmax_rows(lv, cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / rows as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    /// Sums a 2-D tensor along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if d.len() != 2 || axis > 1 {
            return Err(TensorError::Invalid(format!("sum_axis {axis} of {d:?}")));
        }
        let v = self.value(a);
        let (rows, cols) = (d[0], d[1]);
        let (out, dims) = if axis == 0 {
            let mut out = vec![0.0; cols];
            for row in v.chunks(cols) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            (out, vec![1, cols])
        } else {
            (
                v.chunks(cols).map(|row| row.iter().sum()).collect(),
                vec![rows, 1],
            )
        };
        let rg = self.rg(&[a]);
        Ok(self.push(dims, out, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .dims(a)
            .get(axis)
            .ok_or_else(|| TensorError::Invalid(format!("mean_axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Divides each row by its L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let ss = self.sum_axis(sq, 1)?;
        let inv = self.pow(ss, -0.5)?;
        self.mul(a, inv)
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate additively
    /// into every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.node(loss).dims
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let contribs = self.backward_rule(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contribs {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_rule(&self, i: usize, op: &Op, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let kind;
        match op {
            Op::Leaf => return out,
            Op::MatMul { a, b, m, k, n } => {
                kind = OpKind::MatMul;
                if needs(*a) {
                    out.push((*a, kernels::matmul_nt(grad, self.value(*b), *m, *n, *k)));
                }
                if needs(*b) {
                    out.push((*b, kernels::matmul_tn(self.value(*a), grad, *m, *k, *n)));
                }
            }
            Op::Add { a, b, bc, cols } => {
                kind = OpKind::Add;
                if needs(*a) {
                    out.push((*a, grad.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, reduce_bcast(grad, *bc, *cols, self.value(*b).len())));
                }
            }
            Op::Mul { a, b, bc, cols } => {
                kind = OpKind::Mul;
                let av = self.value(*a);
                let bv = self.value(*b);
                if needs(*a) {
                    let ga = grad
                        .iter()
                        .enumerate()
                        .map(|(j, g)| g * bv[bcast_index(j, *bc, *cols)])
                        .collect();
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let prod: Vec<f64> = grad.iter().zip(av).map(|(g, x)| g * x).collect();
                    out.push((*b, reduce_bcast(&prod, *bc, *cols, bv.len())));
                }
            }
            Op::Scale { a, c } => {
                kind = OpKind::Scale;
                out.push((*a, grad.iter().map(|g| g * c).collect()));
            }
            Op::Pow { a, p } => {
                kind = OpKind::Pow;
                let av = self.value(*a);
                let g = grad
                    .iter()
                    .zip(av)
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect();
                out.push((*a, g));
            }
            Op::Transpose { a, rows, cols } => {
                kind = OpKind::Transpose;
                out.push((*a, kernels::transpose(grad, *cols, *rows)));
            }
            Op::Reshape { a } => {
                kind = OpKind::Reshape;
                out.push((*a, grad.to_vec()));
            }
            Op::Concat { parts, axis } => {
                kind = OpKind::Concat;
                let out_cols = self.nodes[i].dims[1];
                let mut offset = 0;
                for &p in parts {
                    let d = self.dims(p);
                    let (rows, cols) = (d[0], d[1]);
                    let g = if *axis == 0 {
                        let g = grad[offset * out_cols..(offset + rows) * out_cols].to_vec();
                        offset += rows;
                        g
                    } else {
                        let mut g = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            g.extend_from_slice(
                                &grad[r * out_cols + offset..r * out_cols + offset + cols],
                            );
                        }
                        offset += cols;
                        g
                    };
                    if needs(p) {
                        out.push((p, g));
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                kind = OpKind::Slice;
                let d = self.dims(*a);
                let mut g = vec![0.0; d[0] * d[1]];
                let od = &self.nodes[i].dims;
                if *axis == 0 {
                    g[start * d[1]..(start + od[0]) * d[1]].copy_from_slice(grad);
                } else {
                    for r in 0..d[0] {
                        g[r * d[1] + start..r * d[1] + start + od[1]]
                            .copy_from_slice(&grad[r * od[1]..(r + 1) * od[1]]);
                    }
                }
                out.push((*a, g));
            }
            Op::Softmax { a, cols } => {
                kind = OpKind::Softmax;
                let y = &self.nodes[i].value;
                let mut g = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(*cols).zip(grad.chunks(*cols)).zip(g.chunks_mut(*cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                out.push((*a, g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                kind = OpKind::LayerNorm;
                let cols = self.value(*gamma).len();
                let gv = self.value(*gamma);
                let rows = xhat.len() / cols;
                if needs(*gamma) {
                    let mut gg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += grad[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    out.push((*gamma, gg));
                }
                if needs(*beta) {
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += grad[r * cols + c];
                        }
                    }
                    out.push((*beta, gb));
                }
                if needs(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let dy = &grad[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = dy.iter().zip(gv).map(|(d, g)| d * g).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h =
                            dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = rstd[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Gelu { a } => {
                kind = OpKind::Gelu;
                let g = grad
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                out.push((*a, g));
            }
            Op::Embedding { table, ids } => {
                kind = OpKind::Embedding;
                let d = self.dims(*table);
                let mut g = vec![0.0; d[0] * d[1]];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d[1] {
                        g[id * d[1] + c] += grad[r * d[1] + c];
                    }
                }
                out.push((*table, g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                kind = OpKind::CrossEntropy;
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = grad[0] / rows as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * cols + t] -= scale;
                }
                out.push((*logits, g));
            }
            Op::Sum { a } => {
                kind = OpKind::Sum;
                out.push((*a, vec![grad[0]; self.value(*a).len()]));
            }
            Op::Mean { a } => {
                kind = OpKind::Mean;
                let n = self.value(*a).len();
                out.push((*a, vec![grad[0] / n as f64; n]));
            }
            Op::SumAxis { a, axis } => {
                kind = OpKind::SumAxis;
                let d = self.dims(*a);
                let (rows, cols) = (d[0], d[1]);
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] = if *axis == 0 { grad[c] } else { grad[r] };
                    }
                }
                out.push((*a, g));
            }
        }
        let f = fault::factor(kind);
        if f != 1.0 {
            for (_, g) in out.iter_mut() {
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
        out
    }
}

fn bcast_index(j: usize, bc: Bcast, cols: usize) -> usize {
    match bc {
        Bcast::Same => j,
        Bcast::Scalar => 0,
        Bcast::Row => j % cols,
        Bcast::Col => j / cols,
    }
}

fn reduce_bcast(grad: &[f64], bc: Bcast, cols: usize, len: usize) -> Vec<f64> {
    match bc {
        Bcast::Same => grad.to_vec(),
        Bcast::Scalar => vec![grad.iter().sum()],
        Bcast::Row | Bcast::Col => {
            let mut g = vec![0.0; len];
            for (j, x) in grad.iter().enumerate() {
                g[bcast_index(j, bc, cols)] += x;
            }
            g
        }
    }
}
