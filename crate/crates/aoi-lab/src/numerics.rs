//! Minimal dense-matrix numerics: a reverse-mode differentiation tape, the
//! Adam update, and a binary parameter-checkpoint container.
//!
//! Everything is double precision and strictly sequential, so identical
//! inputs give bit-identical outputs on a given platform.  The tape owns
//! every intermediate value; operations record enough structure for the
//! backward sweep to read parent values directly off the tape — no closures,
//! no captured state.

use std::path::Path;

use crate::error::{Error, Result};

/// Epsilon inside the normalization denominators.  Tiny on purpose: the
/// normalized output should have unit variance to near machine precision.
const NORM_EPS: f64 = 1e-12;

/// A dense row-major matrix of doubles.  Row vectors are `1×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}×{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Filled with independent uniform draws from `[lo, hi)`.
    pub fn rand_uniform<R: rand::Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a 1×1 tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "expected a 1×1 scalar, got {}×{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot accumulate {}×{} into {}×{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Recorded operation; parents are tape indices.
#[derive(Debug, Clone)]
enum Op {
    Input,
    Matmul(usize, usize),
    Add(usize, usize),
    /// Matrix plus a 1×cols row added to every row.
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    SoftmaxRows(usize),
    Log(usize),
    /// Entries where the mask is true were replaced by the fill value.
    MaskedFill(usize, Vec<bool>),
    /// Per-row normalization with learned 1×cols affine (gamma, beta).
    LayerNormRows(usize, usize, usize),
    /// Per-column normalization across rows ("token" dimension) with learned
    /// 1×cols affine (gamma, beta).
    BatchNormTokens(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Transpose(usize),
    SumAll(usize),
    /// Single entry (r, c) extracted as a 1×1 scalar.
    Entry(usize, usize, usize),
    /// Rows gathered in the given order (duplicates allowed).
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by tape handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for a tape value; zeros when the loss never touched it.
    pub fn wrt(&self, id: TensorId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Borrowed gradient if the value participated in the loss.
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// The recording tape: a flat arena of values in topological order.
#[derive(Debug, Default)]
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

    /// Records a constant input (not differentiated).
    pub fn input(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Input, value, false)
    }

    /// Records a learnable input (differentiated).
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Input, value, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ------------------------------------------------------------------
    // Primitives
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::Shape(format!(
                "matmul of {ar}×{ac} by {br}×{bc}: inner dimensions differ"
            )));
        }
        let mut out = Tensor::zeros(ar, bc);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av.get(i, k);
                    for j in 0..bc {
                        out.data[i * bc + j] += aik * bv.get(k, j);
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a.0, b.0), out, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Shape(format!(
                "add of {}×{} and {}×{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o += v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), out, needs))
    }

    /// Adds a 1×cols bias row to every row of a matrix.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xr, xc) = self.value(x).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != xc {
            return Err(Error::Shape(format!(
                "bias {br}×{bc} does not broadcast over {xr}×{xc}"
            )));
        }
        let mut out = self.value(x).clone();
        for r in 0..xr {
            for c in 0..xc {
                out.data[r * xc + c] += self.value(bias).data[c];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x.0, bias.0), out, needs))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= factor;
        }
        let needs = self.needs(x);
        self.push(Op::Scale(x.0, factor), out, needs)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        let needs = self.needs(x);
        self.push(Op::Tanh(x.0), out, needs)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        let needs = self.needs(x);
        self.push(Op::Relu(x.0), out, needs)
    }

    /// Row-wise softmax (max-shifted).  Rows whose maximum is −∞ (fully
    /// masked) are rejected: they have no distribution.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = &self.value(x).data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                let msg = if row.iter().any(|v| v.is_nan()) {
                    format!("softmax over a row containing NaN (row {i})")
                } else if max == f64::INFINITY {
                    format!("softmax over a row containing +inf (row {i})")
                } else {
                    format!("softmax over a fully masked row (row {i})")
                };
                return Err(Error::Numeric(msg));
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out.data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out.data[i * c + j] /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x.0), out, needs))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            if *v <= 0.0 {
                return Err(Error::Numeric(format!("log of a non-positive value {v}")));
            }
            *v = v.ln();
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Log(x.0), out, needs))
    }

    /// Replaces entries where `mask` is true with `fill` (usually −∞ before a
    /// softmax).  Gradient is zero through filled entries.
    pub fn masked_fill(&mut self, x: TensorId, mask: &[bool], fill: f64) -> Result<TensorId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mask of {} entries over a tensor of {}",
                mask.len(),
                self.value(x).len()
            )));
        }
        let mut out = self.value(x).clone();
        for (v, &m) in out.data.iter_mut().zip(mask) {
            if m {
                *v = fill;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaskedFill(x.0, mask.to_vec()), out, needs))
    }

    /// Normalizes each row to zero mean / unit variance, then applies the
    /// learned per-column affine `gamma ⊙ x̂ + beta`.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        self.check_affine(c, gamma, beta)?;
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = &self.value(x).data[i * c..(i + 1) * c];
            let (mean, std) = moments(row);
            for j in 0..c {
                let xhat = (row[j] - mean) / std;
                out.data[i * c + j] =
                    self.value(gamma).data[j] * xhat + self.value(beta).data[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNormRows(x.0, gamma.0, beta.0), out, needs))
    }

    /// Normalizes each column (feature) across the rows (tokens) of a single
    /// instance, then applies the learned per-column affine.  Independent of
    /// any batching, so inference matches training exactly.
    pub fn batch_norm_tokens(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let (r, c) = self.value(x).shape();
        self.check_affine(c, gamma, beta)?;
        let mut out = Tensor::zeros(r, c);
        for j in 0..c {
            let col: Vec<f64> = (0..r).map(|i| self.value(x).data[i * c + j]).collect();
            let (mean, std) = moments(&col);
            for i in 0..r {
                let xhat = (col[i] - mean) / std;
                out.data[i * c + j] =
                    self.value(gamma).data[j] * xhat + self.value(beta).data[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::BatchNormTokens(x.0, gamma.0, beta.0), out, needs))
    }

    fn check_affine(&self, cols: usize, gamma: TensorId, beta: TensorId) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(id).shape();
            if s != (1, cols) {
                return Err(Error::Shape(format!(
                    "{name} must be 1×{cols}, got {}×{}",
                    s.0, s.1
                )));
            }
        }
        Ok(())
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.0 != rows {
                return Err(Error::Shape(format!(
                    "concat rows differ: {} vs {}",
                    rows, s.0
                )));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pc = self.value(p).cols();
            for i in 0..rows {
                for j in 0..pc {
                    out.data[i * cols + at + j] = self.value(p).get(i, j);
                }
            }
            at += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out, needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.1 != cols {
                return Err(Error::Shape(format!(
                    "concat columns differ: {} vs {}",
                    cols, s.1
                )));
            }
            rows += s.0;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            out.data[at * cols..(at + pv.rows()) * cols].copy_from_slice(&pv.data);
            at += pv.rows();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), out, needs))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.value(x).shape();
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.value(x).get(i, j);
            }
        }
        let needs = self.needs(x);
        self.push(Op::Transpose(x.0), out, needs)
    }

    /// Sum of all entries as a 1×1 scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll(x.0), Tensor::from_vec(1, 1, vec![s]).expect("1x1"), needs)
    }

    /// One entry as a 1×1 scalar.
    pub fn entry(&mut self, x: TensorId, r: usize, c: usize) -> Result<TensorId> {
        let (xr, xc) = self.value(x).shape();
        if r >= xr || c >= xc {
            return Err(Error::Index(format!(
                "entry ({r},{c}) outside {xr}×{xc} tensor"
            )));
        }
        let v = self.value(x).get(r, c);
        let needs = self.needs(x);
        Ok(self.push(Op::Entry(x.0, r, c), Tensor::from_vec(1, 1, vec![v]).expect("1x1"), needs))
    }

    /// Selects rows in the given order; duplicates allowed.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (xr, xc) = self.value(x).shape();
        if rows.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xr) {
            return Err(Error::Index(format!("row {bad} outside {xr}×{xc} tensor")));
        }
        let mut out = Tensor::zeros(rows.len(), xc);
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..xc {
                out.data[i * xc + j] = self.value(x).get(r, j);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::GatherRows(x.0, rows.to_vec()), out, needs))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss.  Consumes the tape: one backward
    /// pass per recorded forward.
    pub fn backward(self, loss: TensorId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    /// Adds this node's contribution to its parents' gradients.
    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], parent: usize, delta: Tensor| {
            match &mut grads[parent] {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |p: usize| self.nodes[p].needs_grad;
        let val = |p: usize| &self.nodes[p].value;
        let out = &self.nodes[i].value;

        match &self.nodes[i].op {
            Op::Input => {}
            Op::Matmul(a, b) => {
                let (ar, ac) = val(*a).shape();
                let (_, bc) = val(*b).shape();
                if needs(*a) {
                    // dA = G · Bᵀ
                    let mut da = Tensor::zeros(ar, ac);
                    for r in 0..ar {
                        for k in 0..ac {
                            let mut acc = 0.0;
                            for j in 0..bc {
                                acc += g.get(r, j) * val(*b).get(k, j);
                            }
                            da.data[r * ac + k] = acc;
                        }
                    }
                    add_to(grads, *a, da);
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let mut db = Tensor::zeros(ac, bc);
                    for k in 0..ac {
                        for j in 0..bc {
                            let mut acc = 0.0;
                            for r in 0..ar {
                                acc += val(*a).get(r, k) * g.get(r, j);
                            }
                            db.data[k * bc + j] = acc;
                        }
                    }
                    add_to(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if needs(p) {
                        add_to(grads, p, g.clone());
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    add_to(grads, *x, g.clone());
                }
                if needs(*bias) {
                    let (r, c) = g.shape();
                    let mut db = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            db.data[j] += g.get(i, j);
                        }
                    }
                    add_to(grads, *bias, db);
                }
            }
            Op::Scale(x, factor) => {
                if needs(*x) {
                    let mut dx = g.clone();
                    for v in &mut dx.data {
                        *v *= factor;
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Tanh(x) => {
                if needs(*x) {
                    let mut dx = g.clone();
                    for (d, y) in dx.data.iter_mut().zip(&out.data) {
                        *d *= 1.0 - y * y;
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let mut dx = g.clone();
                    for (d, v) in dx.data.iter_mut().zip(&val(*x).data) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let (r, c) = out.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let y = &out.data[i * c..(i + 1) * c];
                        let gr = &g.data[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx.data[i * c + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Log(x) => {
                if needs(*x) {
                    let mut dx = g.clone();
                    for (d, v) in dx.data.iter_mut().zip(&val(*x).data) {
                        *d /= v;
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::MaskedFill(x, mask) => {
                if needs(*x) {
                    let mut dx = g.clone();
                    for (d, &m) in dx.data.iter_mut().zip(mask) {
                        if m {
                            *d = 0.0;
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::LayerNormRows(x, gamma, beta) => {
                let (r, c) = val(*x).shape();
                let gv = val(*gamma);
                let mut dgamma = Tensor::zeros(1, c);
                let mut dbeta = Tensor::zeros(1, c);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let row = &val(*x).data[i * c..(i + 1) * c];
                    let (mean, std) = moments(row);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / std).collect();
                    let gr = &g.data[i * c..(i + 1) * c];
                    let gprime: Vec<f64> =
                        (0..c).map(|j| gr[j] * gv.data[j]).collect();
                    let mg: f64 = gprime.iter().sum::<f64>() / c as f64;
                    let mgx: f64 =
                        gprime.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dgamma.data[j] += gr[j] * xhat[j];
                        dbeta.data[j] += gr[j];
                        dx.data[i * c + j] = (gprime[j] - mg - xhat[j] * mgx) / std;
                    }
                }
                if needs(*x) {
                    add_to(grads, *x, dx);
                }
                if needs(*gamma) {
                    add_to(grads, *gamma, dgamma);
                }
                if needs(*beta) {
                    add_to(grads, *beta, dbeta);
                }
            }
            Op::BatchNormTokens(x, gamma, beta) => {
                let (r, c) = val(*x).shape();
                let gv = val(*gamma);
                let mut dgamma = Tensor::zeros(1, c);
                let mut dbeta = Tensor::zeros(1, c);
                let mut dx = Tensor::zeros(r, c);
                for j in 0..c {
                    let col: Vec<f64> = (0..r).map(|i| val(*x).data[i * c + j]).collect();
                    let (mean, std) = moments(&col);
                    let xhat: Vec<f64> = col.iter().map(|v| (v - mean) / std).collect();
                    let gcol: Vec<f64> = (0..r).map(|i| g.data[i * c + j]).collect();
                    let gprime: Vec<f64> = gcol.iter().map(|v| v * gv.data[j]).collect();
                    let mg: f64 = gprime.iter().sum::<f64>() / r as f64;
                    let mgx: f64 =
                        gprime.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / r as f64;
                    for i in 0..r {
                        dgamma.data[j] += gcol[i] * xhat[i];
                        dbeta.data[j] += gcol[i];
                        dx.data[i * c + j] = (gprime[i] - mg - xhat[i] * mgx) / std;
                    }
                }
                if needs(*x) {
                    add_to(grads, *x, dx);
                }
                if needs(*gamma) {
                    add_to(grads, *gamma, dgamma);
                }
                if needs(*beta) {
                    add_to(grads, *beta, dbeta);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let mut at = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if needs(p) {
                        let mut dp = Tensor::zeros(rows, pc);
                        for i in 0..rows {
                            for j in 0..pc {
                                dp.data[i * pc + j] = g.get(i, at + j);
                            }
                        }
                        add_to(grads, p, dp);
                    }
                    at += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = out.cols();
                let mut at = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    if needs(p) {
                        let mut dp = Tensor::zeros(pr, cols);
                        dp.data
                            .copy_from_slice(&g.data[at * cols..(at + pr) * cols]);
                        add_to(grads, p, dp);
                    }
                    at += pr;
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    let (r, c) = g.shape();
                    let mut dx = Tensor::zeros(c, r);
                    for i in 0..r {
                        for j in 0..c {
                            dx.data[j * r + i] = g.get(i, j);
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let (r, c) = val(*x).shape();
                    let gs = g.data[0];
                    let mut dx = Tensor::zeros(r, c);
                    for v in &mut dx.data {
                        *v = gs;
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Entry(x, r, c) => {
                if needs(*x) {
                    let (xr, xc) = val(*x).shape();
                    let mut dx = Tensor::zeros(xr, xc);
                    dx.data[r * xc + c] = g.data[0];
                    add_to(grads, *x, dx);
                }
            }
            Op::GatherRows(x, rows) => {
                if needs(*x) {
                    let (xr, xc) = val(*x).shape();
                    let mut dx = Tensor::zeros(xr, xc);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..xc {
                            dx.data[r * xc + j] += g.get(i, j);
                        }
                    }
                    add_to(grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

/// Mean and sqrt(biased variance + eps) of a slice.
fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + NORM_EPS).sqrt())
}

// ----------------------------------------------------------------------
// Adam
// ----------------------------------------------------------------------

/// Bias-corrected Adam with per-parameter moment buffers.  Buffers are laid
/// out in the order parameters are first presented and must keep that order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter given its gradient.  Parameter
    /// order must match across calls; shapes are checked every time.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "Adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "Adam shapes diverge: param {}×{}, grad {}×{}, moment {}×{}",
                    p.rows(),
                    p.cols(),
                    g.rows(),
                    g.cols(),
                    m.rows(),
                    m.cols()
                )));
            }
            for i in 0..p.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Checkpoint container
// ----------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"TWA1";

/// Writes named tensors as a binary container: magic, then per tensor the
/// name (u64 length + UTF-8), rank, dims and raw doubles (all little-endian),
/// closed by a CRC32 of everything before it.
pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, tensor) in entries {
        if !tensor.is_finite() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` contains NaN/Inf and cannot be checkpointed"
            )));
        }
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a container written by [`save_checkpoint`].  Rank-1 entries load as
/// row vectors.  Truncation, bad magic, CRC mismatches and non-finite values
/// are all rejected.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = std::fs::read(path)?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::Checkpoint(format!(
            "file too short ({} bytes)",
            buf.len()
        )));
    }
    if &buf[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {:02x?}",
            &buf[..4]
        )));
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }

    let mut at = 4usize;
    let mut out = Vec::new();
    let read_u64 = |buf: &[u8], at: &mut usize| -> Result<u64> {
        if *at + 8 > body_end {
            return Err(Error::Checkpoint("truncated record header".to_string()));
        }
        let v = u64::from_le_bytes(buf[*at..*at + 8].try_into().expect("8 bytes"));
        *at += 8;
        Ok(v)
    };
    while at < body_end {
        let name_len = read_u64(&buf, &mut at)? as usize;
        if at + name_len > body_end {
            return Err(Error::Checkpoint("truncated parameter name".to_string()));
        }
        let name = std::str::from_utf8(&buf[at..at + name_len])
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        at += name_len;
        let rank = read_u64(&buf, &mut at)? as usize;
        if rank > 2 {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has unsupported rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&buf, &mut at)? as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked above"),
        };
        let count = rows * cols;
        if at + count * 8 > body_end {
            return Err(Error::Checkpoint(format!(
                "truncated data for parameter `{name}`"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for k in 0..count {
            let v = f64::from_le_bytes(buf[at + k * 8..at + k * 8 + 8].try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` contains a non-finite value"
                )));
            }
            data.push(v);
        }
        at += count * 8;
        out.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    Ok(out)
}
