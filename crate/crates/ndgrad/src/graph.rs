use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use crate::{GradError, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Sub { lhs: Var, rhs: Var, broadcast: bool },
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Matmul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, start: usize, width: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, classes: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Accumulated gradient; only parameter leaves keep one.
    grad: Option<Tensor>,
}

/// Dynamic computation record. Rebuilt for every evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf. Its gradient starts at zero.
    pub fn param(&mut self, value: Tensor) -> Var {
        let grad = Some(Tensor::zeros(value.shape()));
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            grad,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_node(Node {
            value,
            op,
            needs_grad,
            grad: None,
        })
    }

    fn binary_shapes(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<bool> {
        let a = self.nodes[lhs.0].value.shape();
        let b = self.nodes[rhs.0].value.shape();
        if a == b {
            return Ok(false);
        }
        // A single row may be added to every row of a matrix.
        if let ([_, n], [1, n2]) = (a, b) {
            if n == n2 {
                return Ok(true);
            }
        }
        Err(GradError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }

    fn zip_broadcast(&self, lhs: Var, rhs: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = &self.nodes[lhs.0].value;
        let b = self.nodes[rhs.0].value.data();
        let n = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % n]))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    /// Elementwise sum. `rhs` may be a `[1, n]` row added to each row of `lhs`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.binary_shapes("add", lhs, rhs)?;
        let value = self.zip_broadcast(lhs, rhs, |a, b| a + b);
        Ok(self.push(value, Op::Add { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.binary_shapes("sub", lhs, rhs)?;
        let value = self.zip_broadcast(lhs, rhs, |a, b| a - b);
        Ok(self.push(value, Op::Sub { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        if a.shape() != b.shape() {
            return Err(GradError::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = self.zip_broadcast(lhs, rhs, |a, b| a * b);
        Ok(self.push(value, Op::Mul(lhs, rhs), &[lhs, rhs]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn shift(&mut self, x: Var, offset: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + offset);
        self.push(value, Op::Shift(x), &[x])
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { lhs, rhs, m, k, n }, &[lhs, rhs]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        // Written as a negation so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let bad = src.data().iter().find(|v| !(**v > 0.0));
        if let Some(&bad) = bad {
            return Err(GradError::NonPositiveLog { value: bad });
        }
        let value = src.map(f64::ln);
        Ok(self.push(value, Op::Log(x), &[x]))
    }

    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(log_sigmoid);
        self.push(value, Op::LogSigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Joins rank-1/2 tensors: `axis = 0` stacks rows, `axis = 1` appends columns.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(GradError::InvalidShape {
                shape: vec![],
                reason: "concat needs at least one part and axis 0 or 1".into(),
            });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.dims2())
            .collect::<Result<_>>()?;
        let value = if axis == 0 {
            let cols = dims[0].1;
            if let Some(bad) = dims.iter().find(|d| d.1 != cols) {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![dims[0].0, cols],
                    rhs: vec![bad.0, bad.1],
                });
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::new(vec![rows, cols], data)?
        } else {
            let rows = dims[0].0;
            if let Some(bad) = dims.iter().find(|d| d.0 != rows) {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![rows, dims[0].1],
                    rhs: vec![bad.0, bad.1],
                });
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (p, d) in parts.iter().zip(&dims) {
                    let src = self.nodes[p.0].value.data();
                    data.extend_from_slice(&src[r * d.1..(r + 1) * d.1]);
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let lead = src.shape()[0];
        if start >= end || end > lead {
            return Err(GradError::InvalidShape {
                shape: src.shape().to_vec(),
                reason: format!("slice {start}..{end} out of range"),
            });
        }
        let width: usize = src.shape()[1..].iter().product();
        let mut shape = src.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, src.data()[start * width..end * width].to_vec())?;
        Ok(self.push(value, Op::Slice { src: x, start, width }, &[x]))
    }

    /// Per-row `-ln softmax(logits)[target]`, returned as a `[rows]` vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let src = &self.nodes[logits.0].value;
        let (rows, classes) = src.dims2()?;
        if targets.len() != rows {
            return Err(GradError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: src.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut losses = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(GradError::TargetOutOfRange { index: t, classes });
            }
            let row = &src.data()[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            for (p, &z) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            losses.push(lse - row[t]);
        }
        let value = Tensor::new(vec![rows], losses)?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            classes,
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Reverse sweep from a scalar. Parameter gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GradError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                let parent = &nodes[v.0];
                if !parent.needs_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; parent.value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => leaf_updates.push((i, g)),
                Op::Add { lhs, rhs, broadcast } | Op::Sub { lhs, rhs, broadcast } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    acc(*lhs, &|s| add_into(s, &g));
                    let n = nodes[rhs.0].value.len();
                    let bc = *broadcast;
                    acc(*rhs, &|s| {
                        if bc {
                            for (j, gv) in g.iter().enumerate() {
                                s[j % n] += sign * gv;
                            }
                        } else {
                            for (x, gv) in s.iter_mut().zip(&g) {
                                *x += sign * gv;
                            }
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(*a, &|s| {
                        for ((x, gv), y) in s.iter_mut().zip(&g).zip(bv) {
                            *x += gv * y;
                        }
                    });
                    acc(*b, &|s| {
                        for ((x, gv), y) in s.iter_mut().zip(&g).zip(av) {
                            *x += gv * y;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, &|s| {
                        for (x, gv) in s.iter_mut().zip(&g) {
                            *x += c * gv;
                        }
                    });
                }
                Op::Shift(a) => acc(*a, &|s| add_into(s, &g)),
                Op::Matmul { lhs, rhs, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = nodes[lhs.0].value.data();
                    let bv = nodes[rhs.0].value.data();
                    acc(*lhs, &|s| matmul_bt_into(&g, bv, s, m, n, k));
                    acc(*rhs, &|s| matmul_at_into(av, &g, s, m, k, n));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, &|s| {
                        for ((x, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *x += gv * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(*a, &|s| {
                        for ((x, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *x += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Relu(a) => {
                    let input = nodes[a.0].value.data();
                    acc(*a, &|s| {
                        for ((x, gv), iv) in s.iter_mut().zip(&g).zip(input) {
                            if *iv > 0.0 {
                                *x += gv;
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, &|s| {
                        for ((x, gv), yv) in s.iter_mut().zip(&g).zip(y) {
                            *x += gv * yv;
                        }
                    });
                }
                Op::Log(a) => {
                    let input = nodes[a.0].value.data();
                    acc(*a, &|s| {
                        for ((x, gv), iv) in s.iter_mut().zip(&g).zip(input) {
                            *x += gv / iv;
                        }
                    });
                }
                Op::LogSigmoid(a) => {
                    let input = nodes[a.0].value.data();
                    acc(*a, &|s| {
                        for ((x, gv), iv) in s.iter_mut().zip(&g).zip(input) {
                            *x += gv * sigmoid(-iv);
                        }
                    });
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    acc(*a, &|s| s.iter_mut().for_each(|x| *x += gv));
                }
                Op::Mean(a) => {
                    let gv = g[0] / nodes[a.0].value.len() as f64;
                    acc(*a, &|s| s.iter_mut().for_each(|x| *x += gv));
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let len = nodes[p.0].value.len();
                            let chunk = &g[offset..offset + len];
                            acc(*p, &|s| add_into(s, chunk));
                            offset += len;
                        }
                    } else {
                        let total_cols = node.value.dims2().expect("rank 2").1;
                        let mut col = 0;
                        for p in parts {
                            let (rows, cols) = nodes[p.0].value.dims2().expect("rank 2");
                            let c0 = col;
                            acc(*p, &|s| {
                                for r in 0..rows {
                                    for c in 0..cols {
                                        s[r * cols + c] += g[r * total_cols + c0 + c];
                                    }
                                }
                            });
                            col += cols;
                        }
                    }
                }
                Op::Slice { src, start, width } => {
                    let off = start * width;
                    acc(*src, &|s| add_into(&mut s[off..off + g.len()], &g));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                    classes,
                } => {
                    let c = *classes;
                    acc(*logits, &|s| {
                        for (r, &t) in targets.iter().enumerate() {
                            let gv = g[r];
                            let row = &mut s[r * c..(r + 1) * c];
                            for (x, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                                *x += gv * p;
                            }
                            row[t] -= gv;
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_updates {
            if let Some(acc) = self.nodes[i].grad.as_mut() {
                add_into(acc.data_mut(), &g);
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}
