//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly; when any input requires a gradient the
//! application is appended to the tape. Node ids are allocated in order of
//! creation, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Reductions sum left to right over the last axis, so results are
//! bit-reproducible for identical inputs.

use std::sync::Arc;

use super::tensor::{dot, gemm, gemm_nt, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Floor added inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive kernels understood by the tape.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// `[m×k]·[k×n]`
    MatMul,
    /// `[m×k]·[n×k]ᵀ`
    MatMulNt,
    Add,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    /// Row-wise maximum, `[n×m] -> [n×1]`.
    MaxRows,
    /// Row-wise sum, `[n×m] -> [n×1]`.
    SumRows,
    /// Sum of every entry, `-> [1×1]`.
    SumAll,
    /// Replaces entries where the mask is set by a constant.
    MaskFill { mask: Arc<Vec<bool>>, value: f64 },
    Sigmoid,
    /// Column-wise concatenation of equally tall matrices.
    Concat,
    /// Column range `[start, end)`.
    SliceCols { start: usize, end: usize },
    Transpose,
    /// Explicit broadcast of a column vector `[n×1] -> [n×m]`.
    RepeatCols(usize),
    SoftmaxRows,
    /// Row-wise layer normalisation with gain and bias vectors.
    LayerNorm { eps: f64 },
    /// Row lookup into a table (embedding).
    Gather(Arc<Vec<usize>>),
    /// `Σ_rows −Σ_v target·log(softmax(z/τ) + ε)`; the target is a constant.
    SoftTargetXent { target: Arc<Tensor>, tau: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulNt => "matmul_nt",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::MaxRows => "max_reduce",
            Primitive::SumRows => "sum_reduce",
            Primitive::SumAll => "sum_all",
            Primitive::MaskFill { .. } => "mask_fill",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Concat => "concat",
            Primitive::SliceCols { .. } => "slice",
            Primitive::Transpose => "transpose",
            Primitive::RepeatCols(_) => "repeat_cols",
            Primitive::SoftmaxRows => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gather(_) => "gather",
            Primitive::SoftTargetXent { .. } => "soft_target_xent",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::MatMulNt | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::LayerNorm { .. } => Some(3),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn softmax_row(z: &[f64], scale: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in z {
        max = max.max(v * scale);
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Evaluates a primitive on concrete tensors without recording anything.
pub fn primitive_forward(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::invalid(format!(
                "{} expects {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    }
    for t in inputs {
        t.check_finite(op.name())?;
    }
    forward_unchecked(op, inputs)
}

/// Like [`primitive_forward`] but trusts that inputs are finite; graph nodes
/// are validated when created.
fn forward_unchecked(op: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::invalid(format!(
                "{} expects {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    }
    let out = match op {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.require_2d("matmul")?;
            let (k2, n) = b.require_2d("matmul")?;
            if k != k2 {
                return Err(mismatch("matmul", a, b));
            }
            Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))?
        }
        Primitive::MatMulNt => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.require_2d("matmul_nt")?;
            let (n, k2) = b.require_2d("matmul_nt")?;
            if k != k2 {
                return Err(mismatch("matmul_nt", a, b));
            }
            Tensor::new(vec![m, n], gemm_nt(a.data(), b.data(), m, k, n))?
        }
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op.name(), a, b));
            }
            let data = if matches!(op, Primitive::Add) {
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            };
            Tensor::new(a.shape().to_vec(), data)?
        }
        Primitive::Scale(s) => map(inputs[0], |v| v * s),
        Primitive::AddScalar(s) => map(inputs[0], |v| v + s),
        Primitive::Exp => map(inputs[0], f64::exp),
        Primitive::Log => map(inputs[0], f64::ln),
        Primitive::Sigmoid => map(inputs[0], sigmoid),
        Primitive::MaxRows | Primitive::SumRows => {
            let x = inputs[0];
            let (n, _) = x.require_2d(op.name())?;
            let data = (0..n)
                .map(|r| {
                    let row = x.row(r);
                    if matches!(op, Primitive::MaxRows) {
                        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        row.iter().sum()
                    }
                })
                .collect();
            Tensor::new(vec![n, 1], data)?
        }
        Primitive::SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        Primitive::MaskFill { mask, value } => {
            let x = inputs[0];
            if mask.len() != x.numel() {
                return Err(Error::ShapeMismatch {
                    op: "mask_fill",
                    lhs: x.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            let data = x
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| if m { *value } else { v })
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(Error::invalid("concat of nothing"));
            }
            let rows = inputs[0].require_2d("concat")?.0;
            let mut total = 0;
            for t in inputs {
                let (r, c) = t.require_2d("concat")?;
                if r != rows {
                    return Err(mismatch("concat", inputs[0], t));
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in inputs {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        }
        Primitive::SliceCols { start, end } => {
            let x = inputs[0];
            let (n, m) = x.require_2d("slice")?;
            if start >= end || *end > m {
                return Err(Error::invalid(format!(
                    "slice [{start}, {end}) out of range for {m} columns"
                )));
            }
            let mut data = Vec::with_capacity(n * (end - start));
            for r in 0..n {
                data.extend_from_slice(&x.row(r)[*start..*end]);
            }
            Tensor::new(vec![n, end - start], data)?
        }
        Primitive::Transpose => {
            let x = inputs[0];
            let (n, m) = x.require_2d("transpose")?;
            let mut data = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..m {
                    data[c * n + r] = x.data()[r * m + c];
                }
            }
            Tensor::new(vec![m, n], data)?
        }
        Primitive::RepeatCols(m) => {
            let x = inputs[0];
            let (n, one) = x.require_2d("repeat_cols")?;
            if one != 1 {
                return Err(Error::invalid("repeat_cols expects a column vector"));
            }
            let mut data = Vec::with_capacity(n * m);
            for &v in x.data() {
                data.extend(std::iter::repeat(v).take(*m));
            }
            Tensor::new(vec![n, *m], data)?
        }
        Primitive::SoftmaxRows => {
            let x = inputs[0];
            let (n, m) = x.require_2d("softmax")?;
            let mut data = vec![0.0; n * m];
            for r in 0..n {
                softmax_row(x.row(r), 1.0, &mut data[r * m..(r + 1) * m]);
            }
            Tensor::new(vec![n, m], data)?
        }
        Primitive::LayerNorm { eps } => {
            let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
            let (n, m) = x.require_2d("layer_norm")?;
            if gain.numel() != m || bias.numel() != m {
                return Err(mismatch("layer_norm", x, gain));
            }
            let mut data = vec![0.0; n * m];
            for r in 0..n {
                let (mean, inv_std) = row_moments(x.row(r), *eps);
                for c in 0..m {
                    data[r * m + c] =
                        (x.row(r)[c] - mean) * inv_std * gain.data()[c] + bias.data()[c];
                }
            }
            Tensor::new(vec![n, m], data)?
        }
        Primitive::Gather(ids) => {
            let table = inputs[0];
            let (vocab, d) = table.require_2d("gather")?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                if id >= vocab {
                    return Err(Error::invalid(format!("gather index {id} >= {vocab}")));
                }
                data.extend_from_slice(table.row(id));
            }
            Tensor::new(vec![ids.len(), d], data)?
        }
        Primitive::SoftTargetXent { target, tau } => {
            let z = inputs[0];
            if z.shape() != target.shape() {
                return Err(mismatch("soft_target_xent", z, target));
            }
            if *tau <= 0.0 {
                return Err(Error::invalid("temperature must be positive"));
            }
            let (n, m) = z.require_2d("soft_target_xent")?;
            let mut p = vec![0.0; m];
            let mut total = 0.0;
            for r in 0..n {
                softmax_row(z.row(r), 1.0 / tau, &mut p);
                total += xent_row(target.row(r), &p);
            }
            Tensor::scalar(total)
        }
    };
    out.check_finite(op.name())?;
    Ok(out)
}

/// `−Σ t·log(p + ε)` for one row.
pub(crate) fn xent_row(target: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for (t, q) in target.iter().zip(p) {
        s -= t * (q + LOG_EPS).ln();
    }
    s
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

struct Record {
    op: Primitive,
    inputs: Vec<Var>,
}

/// An append-only tape of primitive applications.
#[derive(Default)]
pub struct Graph {
    values: Vec<Arc<Tensor>>,
    requires_grad: Vec<bool>,
    records: Vec<Option<Record>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor>, requires_grad: bool, record: Option<Record>) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.records.push(record);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Adds a leaf. Non-finite leaves are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push(Arc::new(value), requires_grad, None))
    }

    /// Adds a leaf that shares storage with the caller. The value is not
    /// re-validated; callers hand in tensors already known to be finite.
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn param(&mut self, value: &Tensor) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    /// Applies `op` to recorded inputs. The node joins the backward pass only
    /// when some input requires a gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let value = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &*self.values[v.0]).collect();
            forward_unchecked(&op, &refs)?
        };
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        let record = rg.then(|| Record {
            op,
            inputs: inputs.to_vec(),
        });
        Ok(self.push(Arc::new(value), rg, record))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMulNt, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(s), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MaxRows, &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumRows, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn mask_fill(&mut self, a: Var, mask: Arc<Vec<bool>>, value: f64) -> Result<Var> {
        self.apply(Primitive::MaskFill { mask, value }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, end }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn repeat_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        self.apply(Primitive::RepeatCols(m), &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Primitive::Gather(Arc::new(ids.to_vec())), &[table])
    }
    pub fn soft_target_xent(&mut self, logits: Var, target: Arc<Tensor>, tau: f64) -> Result<Var> {
        self.apply(Primitive::SoftTargetXent { target, tau }, &[logits])
    }

    /// `swish(z) = z·sigmoid(z)`, built from primitives.
    pub fn swish(&mut self, z: Var) -> Result<Var> {
        let s = self.sigmoid(z)?;
        self.mul(z, s)
    }

    /// Reverse sweep from a scalar root. Leaves that require a gradient but
    /// are unreachable from the root receive zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.values[root.0].is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if self.requires_grad[root.0] {
            self.grads[root.0] = Some(vec![1.0]);
            for id in (0..=root.0).rev() {
                let Some(g) = self.grads[id].take() else {
                    continue;
                };
                if let Some(record) = &self.records[id] {
                    propagate(
                        record,
                        &self.values[id],
                        &self.values,
                        &self.requires_grad,
                        &mut self.grads,
                        &g,
                    );
                }
                self.grads[id] = Some(g);
            }
        }
        for id in 0..self.values.len() {
            if self.requires_grad[id] && self.records[id].is_none() && self.grads[id].is_none() {
                self.grads[id] = Some(vec![0.0; self.values[id].numel()]);
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Pushes the gradient `g` of one recorded node into its inputs' buffers.
fn propagate(
    record: &Record,
    out: &Tensor,
    values: &[Arc<Tensor>],
    requires_grad: &[bool],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
) {
    let ins: Vec<&Tensor> = record.inputs.iter().map(|v| &*values[v.0]).collect();
    let need = |i: usize| requires_grad[record.inputs[i].0];
    let slot = |i: usize| record.inputs[i].0;
    match &record.op {
        Primitive::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if need(0) {
                add_into(&mut grads[slot(0)], gemm_nt(g, b.data(), m, n, k));
            }
            if need(1) {
                let acc = grads[slot(1)].get_or_insert_with(|| vec![0.0; k * n]);
                gemm_tn_acc(acc, a.data(), g, m, k, n);
            }
        }
        Primitive::MatMulNt => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            if need(0) {
                add_into(&mut grads[slot(0)], gemm(g, b.data(), m, n, k));
            }
            if need(1) {
                let acc = grads[slot(1)].get_or_insert_with(|| vec![0.0; n * k]);
                gemm_tn_acc(acc, g, a.data(), m, n, k);
            }
        }
        Primitive::Add => {
            for i in 0..2 {
                if need(i) {
                    add_into(&mut grads[slot(i)], g.to_vec());
                }
            }
        }
        Primitive::Mul => {
            let (a, b) = (ins[0].data(), ins[1].data());
            if need(0) {
                add_into(
                    &mut grads[slot(0)],
                    g.iter().zip(b).map(|(g, b)| g * b).collect(),
                );
            }
            if need(1) {
                add_into(
                    &mut grads[slot(1)],
                    g.iter().zip(a).map(|(g, a)| g * a).collect(),
                );
            }
        }
        op => {
            let contrib = unary_grad(op, &ins, out, g);
            for (i, c) in contrib.into_iter().enumerate() {
                if let Some(c) = c {
                    if need(i) {
                        add_into(&mut grads[slot(i)], c);
                    }
                }
            }
        }
    }
}

fn unary_grad(op: &Primitive, ins: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        Primitive::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Primitive::AddScalar(_) => vec![Some(g.to_vec())],
        Primitive::Exp => vec![Some(
            g.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
        )],
        Primitive::Log => vec![Some(
            g.iter().zip(ins[0].data()).map(|(g, x)| g / x).collect(),
        )],
        Primitive::Sigmoid => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )],
        Primitive::MaxRows => {
            let x = ins[0];
            let (n, m) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let row = x.row(r);
                let mut best = 0;
                for c in 1..m {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                dx[r * m + best] = g[r];
            }
            vec![Some(dx)]
        }
        Primitive::SumRows => {
            let m = ins[0].shape()[1];
            vec![Some(
                g.iter()
                    .flat_map(|&v| std::iter::repeat(v).take(m))
                    .collect(),
            )]
        }
        Primitive::SumAll => vec![Some(vec![g[0]; ins[0].numel()])],
        Primitive::MaskFill { mask, .. } => vec![Some(
            g.iter()
                .zip(mask.iter())
                .map(|(&g, &m)| if m { 0.0 } else { g })
                .collect(),
        )],
        Primitive::Concat => {
            let rows = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            let mut res = Vec::with_capacity(ins.len());
            for t in ins {
                let c = t.shape()[1];
                let mut d = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                }
                res.push(Some(d));
                offset += c;
            }
            res
        }
        Primitive::SliceCols { start, end } => {
            let (n, m) = (ins[0].shape()[0], ins[0].shape()[1]);
            let w = end - start;
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                dx[r * m + start..r * m + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(dx)]
        }
        Primitive::Transpose => {
            let (n, m) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..m {
                    dx[r * m + c] = g[c * n + r];
                }
            }
            vec![Some(dx)]
        }
        Primitive::RepeatCols(m) => vec![Some(
            g.chunks(*m).map(|row| row.iter().sum()).collect(),
        )],
        Primitive::SoftmaxRows => {
            let (n, m) = (out.shape()[0], out.shape()[1]);
            let y = out.data();
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let yr = &y[r * m..(r + 1) * m];
                let gr = &g[r * m..(r + 1) * m];
                let s = dot(gr, yr);
                for c in 0..m {
                    dx[r * m + c] = yr[c] * (gr[c] - s);
                }
            }
            vec![Some(dx)]
        }
        Primitive::LayerNorm { eps } => {
            let (x, gain) = (ins[0], ins[1]);
            let (n, m) = (x.shape()[0], x.shape()[1]);
            let mut dx = vec![0.0; n * m];
            let mut dgain = vec![0.0; m];
            let mut dbias = vec![0.0; m];
            let mut xhat = vec![0.0; m];
            let mut dxhat = vec![0.0; m];
            for r in 0..n {
                let row = x.row(r);
                let (mean, inv_std) = row_moments(row, *eps);
                let gr = &g[r * m..(r + 1) * m];
                for c in 0..m {
                    xhat[c] = (row[c] - mean) * inv_std;
                    dxhat[c] = gr[c] * gain.data()[c];
                    dgain[c] += gr[c] * xhat[c];
                    dbias[c] += gr[c];
                }
                let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                let mean_dx = dot(&dxhat, &xhat) / m as f64;
                for c in 0..m {
                    dx[r * m + c] = inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }
        Primitive::Gather(ids) => {
            let table = ins[0];
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.numel()];
            for (i, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    dt[id * d + c] += g[i * d + c];
                }
            }
            vec![Some(dt)]
        }
        Primitive::SoftTargetXent { target, tau } => {
            let z = ins[0];
            let (n, m) = (z.shape()[0], z.shape()[1]);
            let mut dz = vec![0.0; n * m];
            let mut p = vec![0.0; m];
            let mut dp = vec![0.0; m];
            for r in 0..n {
                softmax_row(z.row(r), 1.0 / tau, &mut p);
                let t = target.row(r);
                for c in 0..m {
                    dp[c] = -t[c] / (p[c] + LOG_EPS);
                }
                let s = dot(&dp, &p);
                for c in 0..m {
                    dz[r * m + c] = g[0] * p[c] * (dp[c] - s) / tau;
                }
            }
            vec![Some(dz)]
        }
        Primitive::MatMul | Primitive::MatMulNt | Primitive::Add | Primitive::Mul => {
            unreachable!("binary ops handled in propagate")
        }
    }
}
