//! Reverse-mode automatic differentiation over 2-D [`DenseTensor`]s.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! Gradients of intermediates are dropped as soon as they have been
//! propagated; only leaf gradients are returned.

use rand::Rng;

use super::tensor::{gemm, DenseTensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch geometry for the fused multi-head attention primitive.
///
/// Query row `(b, i)` lives at `b * tq + i`, key/value row `(b, j)` at
/// `b * tk + j`; `mask[i * tk + j]` allows query `i` to see key `j`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub mask: Vec<bool>,
}

impl AttentionLayout {
    /// Square lower-triangular mask over `t` positions.
    pub fn causal(batch: usize, t: usize, heads: usize) -> Self {
        let mask = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        Self { batch, tq: t, tk: t, heads, mask }
    }

    /// `tq` trailing queries attending over `tk` keys, query `i` sitting at
    /// key position `tk - tq + i`.
    pub fn causal_suffix(batch: usize, tq: usize, tk: usize, heads: usize) -> Self {
        let offset = tk - tq;
        let mask = (0..tq).flat_map(|i| (0..tk).map(move |j| j <= offset + i)).collect();
        Self { batch, tq, tk, heads, mask }
    }
}

enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, weights: Vec<f64> },
    PlanDistance { a: Var, b: Var, plan: Vec<f64> },
}

struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    /// Gradient of a parameter leaf. Leaves the output does not depend on
    /// report zeros; non-leaf or constant vars report `None`.
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.as_matrix()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: DenseTensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: DenseTensor) -> Var {
        self.push(t, Op::Const, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let vals = src.values().iter().map(|&v| f(v)).collect();
        let t = DenseTensor::new(src.shape().to_vec(), vals).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let vals = va.values().iter().zip(vb.values()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = va.as_matrix();
        let rg = self.rg(a) || self.rg(b);
        self.push(DenseTensor::matrix(r, c, vals).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(row) != (1, c) {
            return shape_err(format!("row broadcast: {:?} onto {:?}", self.dims(row), (r, c)));
        }
        let rv = self.nodes[row.0].value.values().to_vec();
        let xv = self.nodes[x.0].value.values();
        let vals = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * rv[i % c] } else { v + rv[i % c] })
            .collect();
        let rg = self.rg(x) || self.rg(row);
        let op = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        Ok(self.push(DenseTensor::matrix(r, c, vals)?, op, rg))
    }

    /// `x + b` with `b` a `[1, cols]` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, false)
    }

    /// `x ⊙ g` with `g` a `[1, cols]` row broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast(x, g, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err(format!("matmul: [{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.nodes[a.0].value.values(),
            (m, k),
            false,
            self.nodes[b.0].value.values(),
            (k, n),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(DenseTensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut vals = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                vals.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(DenseTensor::matrix(rows, total, vals)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return shape_err("concat_rows: column counts differ");
        }
        let mut vals = Vec::new();
        for &p in parts {
            vals.extend_from_slice(self.nodes[p.0].value.values());
        }
        let rows = vals.len() / cols.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(DenseTensor::matrix(rows, cols, vals)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + width > c {
            return shape_err(format!("slice_cols {start}+{width} > {c}"));
        }
        let src = &self.nodes[x.0].value;
        let vals = (0..r).flat_map(|i| src.row(i)[start..start + width].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(DenseTensor::matrix(r, width, vals)?, Op::SliceCols(x, start), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + count > r {
            return shape_err(format!("slice_rows {start}+{count} > {r}"));
        }
        let vals = self.nodes[x.0].value.values()[start * c..(start + count) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(DenseTensor::matrix(count, c, vals)?, Op::SliceRows(x, start), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err(format!("gather_rows index {bad} >= {r}"));
        }
        let src = &self.nodes[x.0].value;
        let vals = idx.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(DenseTensor::matrix(idx.len(), c, vals)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = &self.nodes[x.0].value;
        let mut vals = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            vals.extend(e.into_iter().map(|v| v / s));
        }
        let rg = self.rg(x);
        self.push(DenseTensor::matrix(r, c, vals).expect("shape"), Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.values().iter().sum();
        let rg = self.rg(x);
        self.push(DenseTensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.values();
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(DenseTensor::scalar(m), Op::Mean(x), rg)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`; the affine part
    /// is left to the caller via [`Tape::mul_row`] / [`Tape::add_row`].
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        let src = &self.nodes[x.0].value;
        let mut vals = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            vals.extend(row.iter().map(|v| (v - mu) * inv));
        }
        let rg = self.rg(x);
        self.push(DenseTensor::matrix(r, c, vals).expect("shape"), Op::LayerNorm { x, inv_std }, rg)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// rest by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be < 1")));
        }
        let (r, c) = self.dims(x);
        let keep = 1.0 / (1.0 - p);
        let mask = (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let m = self.constant(DenseTensor::matrix(r, c, mask)?);
        self.mul(x, m)
    }

    /// Fused scaled dot-product multi-head attention. Returns the attended
    /// values `[batch * tq, width]`; the softmax weights stay on the tape and
    /// can be read with [`Tape::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qr, width) = self.dims(q);
        let AttentionLayout { batch, tq, tk, heads, .. } = layout;
        if layout.mask.len() != tq * tk {
            return shape_err(format!("attention mask has {} entries, need {tq}x{tk}", layout.mask.len()));
        }
        if (0..tq).any(|i| !layout.mask[i * tk..(i + 1) * tk].iter().any(|&m| m)) {
            return shape_err("attention mask leaves a query with no visible key");
        }
        if qr != batch * tq || self.dims(k) != (batch * tk, width) || self.dims(v) != (batch * tk, width) {
            return shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?} for batch {batch}, tq {tq}, tk {tk}",
                self.dims(q),
                self.dims(k),
                self.dims(v)
            ));
        }
        if heads == 0 || width % heads != 0 {
            return shape_err(format!("width {width} not divisible by {heads} heads"));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.nodes[q.0].value.values();
        let kv = self.nodes[k.0].value.values();
        let vv = self.nodes[v.0].value.values();
        let mut out = vec![0.0; qr * width];
        let mut weights = vec![0.0; batch * heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qv[(b * tq + i) * width + off..(b * tq + i) * width + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if layout.mask[i * tk + j] {
                            let krow = &kv[(b * tk + j) * width + off..(b * tk + j) * width + off + dh];
                            let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    let wrow = &mut weights[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                    let mut z = 0.0;
                    for j in 0..tk {
                        if layout.mask[i * tk + j] {
                            let e = (scores[j] - mx).exp();
                            wrow[j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * width + off..(b * tq + i) * width + off + dh];
                    for j in 0..tk {
                        if wrow[j] != 0.0 {
                            wrow[j] /= z;
                            let vrow = &vv[(b * tk + j) * width + off..(b * tk + j) * width + off + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += wrow[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(DenseTensor::matrix(qr, width, out)?, Op::Attention { q, k, v, layout, weights }, rg))
    }

    /// Softmax weights of an attention node, laid out `[batch, heads, tq, tk]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&AttentionLayout, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, weights, .. } => Some((layout, weights)),
            _ => None,
        }
    }

    /// `Σ_ij plan[i][j] · ‖a_i − b_j‖₂` with the plan held constant.
    pub fn plan_distance(&mut self, a: Var, b: Var, plan: &[f64]) -> Result<Var> {
        let (n, d) = self.dims(a);
        let (m, d2) = self.dims(b);
        if d != d2 || plan.len() != n * m {
            return shape_err(format!("plan_distance: a [{n},{d}], b [{m},{d2}], plan {}", plan.len()));
        }
        let av = self.nodes[a.0].value.values();
        let bv = self.nodes[b.0].value.values();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = plan[i * m + j];
                if p != 0.0 {
                    total += p * euclid(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(DenseTensor::scalar(total), Op::PlanDistance { a, b, plan: plan.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Const) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    Some(match grads[i].take() {
                        Some(g) => DenseTensor::new(shape, g).expect("grad shape"),
                        None => DenseTensor::zeros(&shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[i].value.values();
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, row) => {
                let c = self.dims(*row).1;
                self.accumulate(grads, *x, g.to_vec());
                if self.rg(*row) {
                    let mut gr = vec![0.0; c];
                    g.iter().enumerate().for_each(|(k, v)| gr[k % c] += v);
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(x, row) => {
                let c = self.dims(*row).1;
                let (vx, vr) = (self.val(*x), self.val(*row));
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.iter().enumerate().map(|(k, v)| v * vr[k % c]).collect());
                }
                if self.rg(*row) {
                    let mut gr = vec![0.0; c];
                    g.iter().zip(vx).enumerate().for_each(|(k, (v, xv))| gr[k % c] += v * xv);
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(g, (m, n), false, self.val(*b), (k, n), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(self.val(*a), (m, k), true, g, (m, n), false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.rg(p) {
                        let gp = (0..rows).flat_map(|r| g[r * total + off..r * total + off + w].iter().copied()).collect();
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accumulate(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.dims(*x);
                let w = self.nodes[i].value.cols();
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    gx[row * c + start..row * c + start + w].copy_from_slice(&g[row * w..(row + 1) * w]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![0.0; r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![0.0; r * c];
                for (k, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[k * c + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, g.iter().zip(vx).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, g.iter().zip(vx).map(|(g, x)| g / x).collect())
            }
            Op::Square(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, g.iter().zip(vx).map(|(g, x)| 2.0 * g * x).collect())
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = self.dims(*x);
                let mut gx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let mg = gs.iter().sum::<f64>() / c as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[row * c + j] = inv_std[row] * (gs[j] - mg - ys[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Attention { q, k, v, layout, weights } => {
                self.attention_backward(g, *q, *k, *v, layout, weights, grads);
            }
            Op::PlanDistance { a, b, plan } => {
                let (n, d) = self.dims(*a);
                let m = self.dims(*b).0;
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let p = plan[i * m + j];
                        if p == 0.0 {
                            continue;
                        }
                        let (ai, bj) = (&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
                        let dist = euclid(ai, bj);
                        if dist < 1e-12 {
                            continue;
                        }
                        let coef = g[0] * p / dist;
                        for t in 0..d {
                            let diff = coef * (ai[t] - bj[t]);
                            ga[i * d + t] += diff;
                            gb[j * d + t] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        weights: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionLayout { batch, tq, tk, heads, .. } = *layout;
        let width = self.dims(q).1;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dw = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let grow = &g[(b * tq + i) * width + off..(b * tq + i) * width + off + dh];
                    let wrow = &weights[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                    let mut dot = 0.0;
                    for j in 0..tk {
                        if wrow[j] == 0.0 && !layout.mask[i * tk + j] {
                            dw[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv[(b * tk + j) * width + off..(b * tk + j) * width + off + dh];
                        dw[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += dw[j] * wrow[j];
                        let gvrow = &mut gv[(b * tk + j) * width + off..(b * tk + j) * width + off + dh];
                        for (o, x) in gvrow.iter_mut().zip(grow) {
                            *o += wrow[j] * x;
                        }
                    }
                    for j in 0..tk {
                        if !layout.mask[i * tk + j] {
                            continue;
                        }
                        let ds = wrow[j] * (dw[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let qi = (b * tq + i) * width + off;
                        let kj = (b * tk + j) * width + off;
                        for t in 0..dh {
                            gq[qi + t] += ds * kv[kj + t];
                            gk[kj + t] += ds * qv[qi + t];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
