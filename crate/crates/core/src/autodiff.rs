//! Define-by-run reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] walks the
//! nodes in reverse insertion order and accumulates gradients into the
//! leaves. Matrices are rank-2 `[rows, cols]`; scalars have shape `[1]`.
//! The only broadcast is bias-vector addition ([`Tape::add_bias`]).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    })
}

/// Dense row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} must be non-empty with positive dims"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    /// Builds a `[rows, cols]` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(AutodiffError::Invalid("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
            grad: None,
        }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", &[&self.shape, &shape]);
        }
        self.shape = shape;
        Ok(self)
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    Reshape(Var),
    RepeatRows(Var),
    Sum(Var),
    WeightedSqError { pred: Var, target: Var, weights: Vec<f64> },
    Quantize { y: Var, codebook: Var, indices: Vec<usize> },
    Gather { codebook: Var, indices: Vec<usize> },
    SoftAssign { y: Var, codebook: Var, tau: f64 },
    StraightThrough(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | AddBias(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Reshape(a)
            | RepeatRows(a)
            | Sum(a)
            | StraightThrough(a) => vec![*a],
            Slice { src, .. } => vec![*src],
            Concat(v) => v.clone(),
            WeightedSqError { pred, target, .. } => vec![*pred, *target],
            Quantize { y, codebook, .. } | SoftAssign { y, codebook, .. } => vec![*y, *codebook],
            Gather { codebook, .. } => vec![*codebook],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[i][j] = Σ_k a[i][k]·b[k][j]`, accumulated in ascending `k` for every
/// element regardless of how many rows `a` has.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Index of the nearest entry; ties resolve to the lowest index.
pub fn nearest_index(value: f64, entries: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, &e) in entries.iter().enumerate() {
        let dist = (value - e).abs();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
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

    /// Drops every node recorded after the first `len`; handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_shaped(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        self.push(Tensor { shape, data, grad: None }, op)
    }

    /// Records a trainable leaf whose gradient is accumulated by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient accumulated into a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => shape_err(op, &[s]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("matmul", a)?;
        let (n2, p) = self.dims2("matmul", b)?;
        if n != n2 {
            return shape_err("matmul", &[self.shape(a), self.shape(b)]);
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, n, p);
        Ok(self.push_shaped(vec![m, p], out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, &[self.shape(a), self.shape(b)]);
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_shaped(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Adds a bias vector (`cols` elements) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2("add_bias", x)?;
        if self.value(bias).numel() != c {
            return shape_err("add_bias", &[self.shape(x), self.shape(bias)]);
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_shaped(shape, data, Op::AddBias(x, bias)))
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_shaped(shape, data, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(Op::Scale(x, factor), x, |v| v * factor)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(Op::Tanh(x), x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(Op::Log(x), x, f64::ln)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let data = softmax_rows(self.value(x).data(), cols);
        let shape = self.shape(x).to_vec();
        self.push_shaped(shape, data, Op::Softmax(x))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let data = log_softmax_rows(self.value(x).data(), cols);
        let shape = self.shape(x).to_vec();
        self.push_shaped(shape, data, Op::LogSoftmax(x))
    }

    /// Concatenates rank-2 tensors with equal row counts along the columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid("concat of zero tensors".into()));
        }
        let dims = parts.iter().map(|&p| self.dims2("concat", p)).collect::<Result<Vec<_>>>()?;
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return shape_err("concat", &shapes);
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push_shaped(vec![rows, total], data, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice", x)?;
        if start >= end || end > cols {
            return shape_err("slice", &[self.shape(x), &[start, end]]);
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        Ok(self.push_shaped(vec![rows, end - start], data, Op::Slice { src: x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() || shape.contains(&0) {
            return shape_err("reshape", &[self.shape(x), shape]);
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push_shaped(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Stacks `times` copies of a rank-2 tensor vertically.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("repeat_rows", x)?;
        if times == 0 {
            return shape_err("repeat_rows", &[self.shape(x), &[times]]);
        }
        let src = self.value(x).data();
        let data: Vec<f64> = (0..times).flat_map(|_| src.iter().copied()).collect();
        Ok(self.push_shaped(vec![rows * times, cols], data, Op::RepeatRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_shaped(vec![1], vec![s], Op::Sum(x))
    }

    /// Mean over rows of `Σ_c w[c]·(pred − target)²`.
    pub fn weighted_sq_error(&mut self, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
        self.same_shape("weighted_sq_error", pred, target)?;
        let (rows, cols) = self.dims2("weighted_sq_error", pred)?;
        if weights.len() != cols {
            return shape_err("weighted_sq_error", &[self.shape(pred), &[weights.len()]]);
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = 0.0;
        for r in 0..rows {
            let mut row = 0.0;
            for c in 0..cols {
                let d = p[r * cols + c] - t[r * cols + c];
                row += weights[c] * d * d;
            }
            total += row;
        }
        let value = total / rows as f64;
        Ok(self.push_shaped(
            vec![1],
            vec![value],
            Op::WeightedSqError {
                pred,
                target,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Unweighted mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let cols = self.value(pred).cols();
        self.weighted_sq_error(pred, target, &vec![1.0 / cols as f64; cols])
    }

    fn check_codebook(&self, op: &'static str, y: Var, codebook: Var) -> Result<(usize, usize, usize)> {
        let (b, d) = self.dims2(op, y)?;
        let (d2, k) = self.dims2(op, codebook)?;
        if d != d2 {
            return shape_err(op, &[self.shape(y), self.shape(codebook)]);
        }
        Ok((b, d, k))
    }

    /// Per-dimension nearest-entry quantization of `y [B×D]` against
    /// `codebook [D×K]`. Backward is straight-through for `y`; the selected
    /// codebook entry receives the output gradient.
    pub fn quantize(&mut self, y: Var, codebook: Var) -> Result<(Var, Vec<usize>)> {
        let (b, d, k) = self.check_codebook("quantize", y, codebook)?;
        let yv = self.value(y).data();
        let cb = self.value(codebook).data();
        let mut indices = Vec::with_capacity(b * d);
        let mut out = Vec::with_capacity(b * d);
        for row in 0..b {
            for dim in 0..d {
                let entries = &cb[dim * k..(dim + 1) * k];
                let idx = nearest_index(yv[row * d + dim], entries);
                indices.push(idx);
                out.push(entries[idx]);
            }
        }
        let var = self.push_shaped(
            vec![b, d],
            out,
            Op::Quantize {
                y,
                codebook,
                indices: indices.clone(),
            },
        );
        Ok((var, indices))
    }

    /// Dequantizes row-major `indices` (length a multiple of D) to `[B×D]`.
    pub fn gather(&mut self, codebook: Var, indices: &[usize]) -> Result<Var> {
        let (d, k) = self.dims2("gather", codebook)?;
        if indices.is_empty() || !indices.len().is_multiple_of(d) || indices.iter().any(|&i| i >= k) {
            return shape_err("gather", &[self.shape(codebook), &[indices.len()]]);
        }
        let cb = self.value(codebook).data();
        let out = indices.iter().enumerate().map(|(n, &i)| cb[(n % d) * k + i]).collect();
        Ok(self.push_shaped(
            vec![indices.len() / d, d],
            out,
            Op::Gather {
                codebook,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Soft assignment `softmax_k(−(y[b,d] − c[d,k])² / tau)` with shape
    /// `[(B·D) × K]`.
    pub fn soft_assign(&mut self, y: Var, codebook: Var, tau: f64) -> Result<Var> {
        let (b, d, k) = self.check_codebook("soft_assign", y, codebook)?;
        let yv = self.value(y).data();
        let cb = self.value(codebook).data();
        let mut logits = Vec::with_capacity(b * d * k);
        for row in 0..b {
            for dim in 0..d {
                let v = yv[row * d + dim];
                for e in &cb[dim * k..(dim + 1) * k] {
                    logits.push(-(v - e) * (v - e) / tau);
                }
            }
        }
        let data = softmax_rows(&logits, k);
        Ok(self.push_shaped(vec![b * d, k], data, Op::SoftAssign { y, codebook, tau }))
    }

    /// Forward value `hard`; backward passes the gradient to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return shape_err("straight_through", &[hard.shape(), self.shape(soft)]);
        }
        Ok(self.push(Tensor { grad: None, ..hard }, Op::StraightThrough(soft)))
    }

    /// Accumulates `∂root/∂leaf` into every trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_seeded(root, 1.0)
    }

    /// Like [`Tape::backward`] with the upstream gradient of `root` set to `seed`.
    pub fn backward_seeded(&mut self, root: Var, seed: f64) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(AutodiffError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![seed]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: &Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, n) = self.dims2("matmul", *a).unwrap();
                let p = self.value(*b).cols();
                let bt = transpose(val(b), n, p);
                let at = transpose(val(a), m, n);
                vec![(*a, matmul_raw(g, &bt, m, p, n)), (*b, matmul_raw(&at, g, n, m, p))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect()),
            ],
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::Tanh(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Sigmoid(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| g * y).collect())],
            Op::Log(x) => vec![(*x, g.iter().zip(val(x)).map(|(g, v)| g / v).collect())],
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let mut gi = vec![0.0; g.len()];
                for ((gr, sr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(gi.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for ((d, gv), sv) in dst.iter_mut().zip(gr).zip(sr) {
                        *d = sv * (gv - dot);
                    }
                }
                vec![(*x, gi)]
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                let mut gi = vec![0.0; g.len()];
                for ((gr, lr), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(gi.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, gv), lv) in dst.iter_mut().zip(gr).zip(lr) {
                        *d = gv - lv.exp() * total;
                    }
                }
                vec![(*x, gi)]
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    res.push((*p, gp));
                }
                res
            }
            Op::Slice { src, start } => {
                let cols = self.value(*src).cols();
                let width = node.value.cols();
                let mut gs = vec![0.0; self.value(*src).numel()];
                for (r, row) in g.chunks(width).enumerate() {
                    gs[r * cols + start..r * cols + start + width].copy_from_slice(row);
                }
                vec![(*src, gs)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::RepeatRows(x) => {
                let n = self.value(*x).numel();
                let mut gx = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::WeightedSqError { pred, target, weights } => {
                let cols = weights.len();
                let rows = self.value(*pred).rows() as f64;
                let gp: Vec<f64> = val(pred)
                    .iter()
                    .zip(val(target))
                    .enumerate()
                    .map(|(i, (p, t))| g[0] * 2.0 * weights[i % cols] * (p - t) / rows)
                    .collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(*pred, gp), (*target, gt)]
            }
            Op::Quantize { y, codebook, indices } => {
                let k = self.value(*codebook).cols();
                let d = self.value(*y).cols();
                let mut gc = vec![0.0; self.value(*codebook).numel()];
                for (n, (&i, gv)) in indices.iter().zip(g).enumerate() {
                    gc[(n % d) * k + i] += gv;
                }
                vec![(*y, g.to_vec()), (*codebook, gc)]
            }
            Op::Gather { codebook, indices } => {
                let (d, k) = self.dims2("gather", *codebook).unwrap();
                let mut gc = vec![0.0; d * k];
                for (n, (&i, gv)) in indices.iter().zip(g).enumerate() {
                    gc[(n % d) * k + i] += gv;
                }
                vec![(*codebook, gc)]
            }
            Op::SoftAssign { y, codebook, tau } => {
                let (d, k) = self.dims2("soft_assign", *codebook).unwrap();
                let yv = val(y);
                let cb = val(codebook);
                let mut gy = vec![0.0; yv.len()];
                let mut gc = vec![0.0; cb.len()];
                for (n, ((gr, sr), gyv)) in g.chunks(k).zip(out.chunks(k)).zip(gy.iter_mut()).enumerate() {
                    let dim = n % d;
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        let dlogit = sr[j] * (gr[j] - dot);
                        let diff = yv[n] - cb[dim * k + j];
                        *gyv -= dlogit * 2.0 * diff / tau;
                        gc[dim * k + j] += dlogit * 2.0 * diff / tau;
                    }
                }
                vec![(*y, gy), (*codebook, gc)]
            }
            Op::StraightThrough(soft) => vec![(*soft, g.to_vec())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn matmul_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 4]));
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        let sm = t.softmax(z);
        assert_eq!(t.value(th).data(), &[0.0; 4]);
        assert_eq!(t.value(sg).data(), &[0.5; 4]);
        assert_eq!(t.value(sm).data(), &[0.25; 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).unwrap_err().to_string().contains("add"));
        assert!(t.concat(&[a, c]).is_err());
        assert!(t.slice(a, 2, 4).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero_weights() {
        let xs = [0.5, -1.0, 2.0];
        let mut t = Tape::new();
        let w = t.leaf(Tensor::matrix(&[&[0.0, 0.0, 0.0]]).unwrap());
        let x = t.constant(Tensor::matrix(&[&[xs[0]], &[xs[1]], &[xs[2]]]).unwrap());
        let dot = t.matmul(w, x).unwrap();
        let s = t.sigmoid(dot);
        t.backward(s).unwrap();
        let g = t.grad(w).unwrap();
        for (gv, xv) in g.iter().zip(xs) {
            assert!(close(*gv, 0.25 * xv));
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, -2.0]));
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, -8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.3, 0.7]));
        let y = t.exp(x);
        let s = t.sum(y);
        t.backward_seeded(s, 0.0).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0]));
        let c = t.constant(Tensor::row(&[2.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let mut t = Tape::new();
        let cb = t.leaf(Tensor::matrix(&[&[-1.0, 0.0, 1.0, 2.0]]).unwrap());
        let y = t.leaf(Tensor::matrix(&[&[0.4], &[0.5], &[7.0]]).unwrap());
        let (q, idx) = t.quantize(y, cb).unwrap();
        assert_eq!(idx, vec![1, 1, 3]);
        assert_eq!(t.value(q).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn quantize_straight_through_grads() {
        let mut t = Tape::new();
        let cb = t.leaf(Tensor::matrix(&[&[-1.0, 0.0, 1.0, 2.0]]).unwrap());
        let y = t.leaf(Tensor::matrix(&[&[0.4], &[0.45], &[1.8]]).unwrap());
        let target = t.constant(Tensor::matrix(&[&[1.0], &[1.0], &[1.0]]).unwrap());
        let (q, _) = t.quantize(y, cb).unwrap();
        let loss = t.mse(q, target).unwrap();
        t.backward(loss).unwrap();
        // dL/dq = 2(q - target)/3
        let expected = [2.0 * (0.0 - 1.0) / 3.0, 2.0 * (0.0 - 1.0) / 3.0, 2.0 * (2.0 - 1.0) / 3.0];
        for (g, e) in t.grad(y).unwrap().iter().zip(expected) {
            assert!(close(*g, e));
        }
        let gc = t.grad(cb).unwrap();
        assert!(close(gc[0], 0.0));
        assert!(close(gc[1], expected[0] + expected[1]));
        assert!(close(gc[2], 0.0));
        assert!(close(gc[3], expected[2]));
    }

    #[test]
    fn gather_matches_quantize() {
        let mut t = Tape::new();
        let cb = t.constant(Tensor::matrix(&[&[-1.0, 0.0, 1.0, 2.0], &[5.0, 6.0, 7.0, 8.0]]).unwrap());
        let y = t.constant(Tensor::matrix(&[&[0.9, 7.4], &[-3.0, 100.0]]).unwrap());
        let (q, idx) = t.quantize(y, cb).unwrap();
        let g = t.gather(cb, &idx).unwrap();
        assert_eq!(t.value(q).data(), t.value(g).data());
        assert!(t.gather(cb, &[0, 4]).is_err());
    }

    #[test]
    fn straight_through_forwards_hard_value() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.2, 0.8]));
        let s = t.softmax(x);
        let st = t.straight_through(Tensor::row(&[0.0, 1.0]), s).unwrap();
        assert_eq!(t.value(st).data(), &[0.0, 1.0]);
        let w = t.constant(Tensor::row(&[1.0, 0.0]));
        let m = t.mul(st, w).unwrap();
        let root = t.sum(m);
        t.backward(root).unwrap();
        let p = t.value(s).data().to_vec();
        let g = t.grad(x).unwrap();
        assert!(close(g[0], p[0] * (1.0 - p[0])));
        assert!(close(g[1], -p[0] * p[1]));
    }
}
