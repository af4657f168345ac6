//! Recorded-operation reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op on a [`Tape`] computes its forward value immediately and appends a
//! node that remembers its parents. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep. A tape supports exactly one backward pass.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Coefficient of the cubic term in the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
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
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    LayerNorm(usize, f64),
    Gelu(usize),
    Gather(usize, Vec<usize>),
    Concat(Vec<usize>),
    Transpose(usize),
    Distance(usize, usize),
    CrossEntropy(usize, Vec<usize>),
    BceWithLogits(usize, Vec<f64>),
    Sum(usize),
    ClipMax(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of tensor operations.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[var.0]),
        }
    }
}

fn shape_str(dims: &[&[usize]]) -> String {
    dims.iter()
        .map(|d| format!("{:?}", d))
        .collect::<Vec<_>>()
        .join(" x ")
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (y, dy)
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut total = 0.0;
    for (j, &v) in row.iter().enumerate() {
        out[j] = if keep(j) { (v - max).exp() } else { 0.0 };
        total += out[j];
    }
    if total > 0.0 {
        for o in out.iter_mut() {
            *o /= total;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(inner.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|&v| inner.nodes[v].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.with_value(v, |t| t.item())
    }

    /// `a [.., k] · b [k, n] → [.., n]`; leading dims of `a` are flattened.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            if ta.rank() < 1 || tb.rank() != 2 || ta.last_dim() != tb.dims()[0] {
                return Err(Error::shape("matmul", shape_str(&[ta.dims(), tb.dims()])));
            }
            let (m, k, n) = (ta.rows(), tb.dims()[0], tb.dims()[1]);
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            let mut dims = ta.dims()[..ta.rank() - 1].to_vec();
            dims.push(n);
            Tensor::new(dims, out)?
        };
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            if !ta.same_shape(tb) {
                return Err(Error::shape(name, shape_str(&[ta.dims(), tb.dims()])));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.dims().to_vec(), data)?
        };
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn rowwise(
        &self,
        name: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (tx, tv) = (&inner.nodes[x.0].value, &inner.nodes[v.0].value);
            if tv.rank() != 1 || tx.rank() < 1 || tx.last_dim() != tv.len() {
                return Err(Error::shape(name, shape_str(&[tx.dims(), tv.dims()])));
            }
            let d = tv.len();
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, tv.data()[i % d]))
                .collect();
            Tensor::new(tx.dims().to_vec(), data)?
        };
        let rg = self.needs(&[x.0, v.0]);
        Ok(self.push(value, op, rg))
    }

    /// Adds a `[d]` bias to every row of `x [.., d]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        self.rowwise("add_bias", x, bias, |a, b| a + b, Op::AddBias(x.0, bias.0))
    }

    /// Multiplies every row of `x [.., d]` elementwise by a `[d]` gain.
    pub fn mul_row(&self, x: Var, gain: Var) -> Result<Var> {
        self.rowwise("mul_row", x, gain, |a, b| a * b, Op::MulRow(x.0, gain.0))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let value = self.with_value(x, |t| {
            Tensor::new(t.dims().to_vec(), t.data().iter().map(|v| v * c).collect())
                .expect("same shape")
        });
        let rg = self.needs(&[x.0]);
        self.push(value, Op::Scale(x.0, c), rg)
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last dim. Entries whose mask is `false` get exactly
    /// zero weight and receive no gradient.
    pub fn masked_softmax(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let tx = &inner.nodes[x.0].value;
            if tx.rank() < 1 {
                return Err(Error::shape("softmax", shape_str(&[tx.dims()])));
            }
            if let Some(m) = mask {
                if m.len() != tx.len() {
                    return Err(Error::shape(
                        "softmax",
                        format!("{:?} with mask of {}", tx.dims(), m.len()),
                    ));
                }
            }
            let d = tx.last_dim();
            let mut out = vec![0.0; tx.len()];
            for r in 0..tx.rows() {
                let span = r * d..(r + 1) * d;
                softmax_row(
                    &tx.data()[span.clone()],
                    mask.map(|m| &m[span.clone()]),
                    &mut out[span],
                );
            }
            Tensor::new(tx.dims().to_vec(), out)?
        };
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, Op::Softmax(x.0), rg))
    }

    /// Normalizes each last-dim row to zero mean and unit variance, no affine.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::shape("layer_norm", format!("eps {eps} must be positive")));
        }
        let value = {
            let inner = self.inner.borrow();
            let tx = &inner.nodes[x.0].value;
            if tx.rank() < 1 || tx.last_dim() == 0 {
                return Err(Error::shape("layer_norm", shape_str(&[tx.dims()])));
            }
            let d = tx.last_dim();
            let mut out = vec![0.0; tx.len()];
            for r in 0..tx.rows() {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * inv;
                }
            }
            Tensor::new(tx.dims().to_vec(), out)?
        };
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, Op::LayerNorm(x.0, eps), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.with_value(x, |t| {
            Tensor::new(
                t.dims().to_vec(),
                t.data().iter().map(|&v| gelu_parts(v).0).collect(),
            )
            .expect("same shape")
        });
        let rg = self.needs(&[x.0]);
        self.push(value, Op::Gelu(x.0), rg)
    }

    /// Selects rows of a rank-2 `table`: `[rows.len(), d]`.
    pub fn gather_rows(&self, table: Var, rows: &[usize]) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let tt = &inner.nodes[table.0].value;
            if tt.rank() != 2 {
                return Err(Error::shape("gather_rows", shape_str(&[tt.dims()])));
            }
            let (n, d) = (tt.dims()[0], tt.dims()[1]);
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= n {
                    return Err(Error::shape(
                        "gather_rows",
                        format!("row {r} out of range for {:?}", tt.dims()),
                    ));
                }
                out.extend_from_slice(tt.row(r));
            }
            Tensor::new(vec![rows.len(), d], out)?
        };
        let rg = self.needs(&[table.0]);
        Ok(self.push(value, Op::Gather(table.0, rows.to_vec()), rg))
    }

    /// Token-embedding lookup; identical to [`Tape::gather_rows`].
    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Concatenates along the last dim; leading dims must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let value = {
            let inner = self.inner.borrow();
            let ts: Vec<&Tensor> = parts.iter().map(|p| &inner.nodes[p.0].value).collect();
            let lead = &ts[0].dims()[..ts[0].rank().saturating_sub(1)];
            if ts
                .iter()
                .any(|t| t.rank() < 1 || &t.dims()[..t.rank() - 1] != lead)
            {
                let dims: Vec<&[usize]> = ts.iter().map(|t| t.dims()).collect();
                return Err(Error::shape("concat", shape_str(&dims)));
            }
            let rows = ts[0].rows();
            let width: usize = ts.iter().map(|t| t.last_dim()).sum();
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in &ts {
                    out.extend_from_slice(t.row(r));
                }
            }
            let mut dims = lead.to_vec();
            dims.push(width);
            Tensor::new(dims, out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(value, Op::Concat(ids), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let tx = &inner.nodes[x.0].value;
            if tx.rank() != 2 {
                return Err(Error::shape("transpose", shape_str(&[tx.dims()])));
            }
            let (m, n) = (tx.dims()[0], tx.dims()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = tx.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)?
        };
        let rg = self.needs(&[x.0]);
        Ok(self.push(value, Op::Transpose(x.0), rg))
    }

    /// Euclidean distance between two same-shaped tensors, as a scalar.
    ///
    /// The gradient at zero distance is taken as zero.
    pub fn euclidean_distance(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            if ta.len() != tb.len() || ta.rows() != tb.rows() {
                return Err(Error::shape(
                    "euclidean_distance",
                    shape_str(&[ta.dims(), tb.dims()]),
                ));
            }
            let ss: f64 = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(ss.sqrt())
        };
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Distance(a.0, b.0), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let tl = &inner.nodes[logits.0].value;
            if tl.rank() < 1 || tl.rows() != targets.len() || targets.is_empty() {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{:?} with {} targets", tl.dims(), targets.len()),
                ));
            }
            let v = tl.last_dim();
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("target {t} out of range for {:?}", tl.dims()),
                    ));
                }
                let row = tl.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Tensor::scalar(total / targets.len() as f64)
        };
        let rg = self.needs(&[logits.0]);
        Ok(self.push(value, Op::CrossEntropy(logits.0, targets.to_vec()), rg))
    }

    /// Mean binary cross-entropy of independent sigmoid scores against 0/1 targets.
    pub fn bce_with_logits(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let tl = &inner.nodes[logits.0].value;
            if tl.len() != targets.len() || targets.is_empty() {
                return Err(Error::shape(
                    "bce_with_logits",
                    format!("{:?} with {} targets", tl.dims(), targets.len()),
                ));
            }
            let total: f64 = tl
                .data()
                .iter()
                .zip(targets)
                .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / targets.len() as f64)
        };
        let rg = self.needs(&[logits.0]);
        Ok(self.push(value, Op::BceWithLogits(logits.0, targets.to_vec()), rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = self.with_value(x, |t| Tensor::scalar(t.data().iter().sum()));
        let rg = self.needs(&[x.0]);
        self.push(value, Op::Sum(x.0), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.with_value(x, |t| t.len().max(1));
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise `min(x, tau)`; gradient passes only where `x < tau`.
    pub fn clip_max(&self, x: Var, tau: f64) -> Var {
        let value = self.with_value(x, |t| {
            Tensor::new(t.dims().to_vec(), t.data().iter().map(|v| v.min(tau)).collect())
                .expect("same shape")
        });
        let rg = self.needs(&[x.0]);
        self.push(value, Op::ClipMax(x.0, tau), rg)
    }

    /// Sums same-shaped vars in the given order.
    pub fn add_all(&self, vars: &[Var]) -> Result<Option<Var>> {
        let mut iter = vars.iter();
        let Some(&first) = iter.next() else {
            return Ok(None);
        };
        let mut acc = first;
        for &v in iter {
            acc = self.add(acc, v)?;
        }
        Ok(Some(acc))
    }

    /// Reverse sweep from a scalar `loss`. The tape cannot be differentiated again.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape("backward already run on this tape".into()));
        }
        if inner.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got {:?}",
                inner.nodes[loss.0].value.dims()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), tb.dims()[0], tb.dims()[1]);
                    if wants(*a) {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads[*a], da);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                let drow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if wants(*a) {
                        accumulate(
                            &mut grads[*a],
                            g.iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                        );
                    }
                    if wants(*b) {
                        accumulate(
                            &mut grads[*b],
                            g.iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                        );
                    }
                }
                Op::AddBias(x, b) => {
                    let d = val(*b).len();
                    if wants(*b) {
                        let mut db = vec![0.0; d];
                        for (i, gv) in g.iter().enumerate() {
                            db[i % d] += gv;
                        }
                        accumulate(&mut grads[*b], db);
                    }
                    if wants(*x) {
                        accumulate(&mut grads[*x], g);
                    }
                }
                Op::MulRow(x, w) => {
                    let (tx, tw) = (val(*x), val(*w));
                    let d = tw.len();
                    if wants(*w) {
                        let mut dw = vec![0.0; d];
                        for (i, gv) in g.iter().enumerate() {
                            dw[i % d] += gv * tx.data()[i];
                        }
                        accumulate(&mut grads[*w], dw);
                    }
                    if wants(*x) {
                        accumulate(
                            &mut grads[*x],
                            g.iter()
                                .enumerate()
                                .map(|(i, gv)| gv * tw.data()[i % d])
                                .collect(),
                        );
                    }
                }
                Op::Scale(x, c) => {
                    if wants(*x) {
                        accumulate(&mut grads[*x], g.iter().map(|v| v * c).collect());
                    }
                }
                Op::Softmax(x) => {
                    if wants(*x) {
                        let y = &node.value;
                        let d = y.last_dim();
                        let mut dx = vec![0.0; y.len()];
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * d..(r + 1) * d];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dx[r * d + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::LayerNorm(x, eps) => {
                    if wants(*x) {
                        let tx = val(*x);
                        let y = &node.value;
                        let d = y.last_dim();
                        let mut dx = vec![0.0; y.len()];
                        for r in 0..y.rows() {
                            let xr = tx.row(r);
                            let mean = xr.iter().sum::<f64>() / d as f64;
                            let var =
                                xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                            let inv = 1.0 / (var + eps).sqrt();
                            let yr = y.row(r);
                            let gr = &g[r * d..(r + 1) * d];
                            let gmean = gr.iter().sum::<f64>() / d as f64;
                            let gymean =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                dx[r * d + j] = inv * (gr[j] - gmean - yr[j] * gymean);
                            }
                        }
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Gelu(x) => {
                    if wants(*x) {
                        let dx = val(*x)
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&v, gv)| gv * gelu_parts(v).1)
                            .collect();
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Gather(t, rows) => {
                    if wants(*t) {
                        let tt = val(*t);
                        let d = tt.last_dim();
                        let mut dt = vec![0.0; tt.len()];
                        for (k, &r) in rows.iter().enumerate() {
                            for j in 0..d {
                                dt[r * d + j] += g[k * d + j];
                            }
                        }
                        accumulate(&mut grads[*t], dt);
                    }
                }
                Op::Concat(parts) => {
                    let width = node.value.last_dim();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).last_dim();
                        if wants(p) {
                            let mut dp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                dp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                            }
                            accumulate(&mut grads[p], dp);
                        }
                        offset += w;
                    }
                }
                Op::Transpose(x) => {
                    if wants(*x) {
                        let (m, n) = (val(*x).dims()[0], val(*x).dims()[1]);
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = g[j * m + i];
                            }
                        }
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Distance(a, b) => {
                    let dist = node.value.data()[0];
                    let coeff = if dist > 0.0 { g[0] / dist } else { 0.0 };
                    let diff: Vec<f64> = val(*a)
                        .data()
                        .iter()
                        .zip(val(*b).data())
                        .map(|(x, y)| (x - y) * coeff)
                        .collect();
                    if wants(*b) {
                        accumulate(&mut grads[*b], diff.iter().map(|v| -v).collect());
                    }
                    if wants(*a) {
                        accumulate(&mut grads[*a], diff);
                    }
                }
                Op::CrossEntropy(l, targets) => {
                    if wants(*l) {
                        let tl = val(*l);
                        let v = tl.last_dim();
                        let scale = g[0] / targets.len() as f64;
                        let mut dl = vec![0.0; tl.len()];
                        for (r, &t) in targets.iter().enumerate() {
                            let out = &mut dl[r * v..(r + 1) * v];
                            softmax_row(tl.row(r), None, out);
                            out[t] -= 1.0;
                            for o in out.iter_mut() {
                                *o *= scale;
                            }
                        }
                        accumulate(&mut grads[*l], dl);
                    }
                }
                Op::BceWithLogits(l, targets) => {
                    if wants(*l) {
                        let scale = g[0] / targets.len() as f64;
                        let dl = val(*l)
                            .data()
                            .iter()
                            .zip(targets)
                            .map(|(&x, &t)| (1.0 / (1.0 + (-x).exp()) - t) * scale)
                            .collect();
                        accumulate(&mut grads[*l], dl);
                    }
                }
                Op::Sum(x) => {
                    if wants(*x) {
                        accumulate(&mut grads[*x], vec![g[0]; val(*x).len()]);
                    }
                }
                Op::ClipMax(x, tau) => {
                    if wants(*x) {
                        let dx = val(*x)
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&v, gv)| if v < *tau { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[*x], dx);
                    }
                }
            }
        }

        let dims = nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => {
                    Some(Tensor::new(n.value.dims().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, dims })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3]));
        let y = tape.value(tape.softmax(x).unwrap());
        for v in y.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn distance_to_self_is_zero() {
        let tape = Tape::new();
        let v = tape.param(&Tensor::vector(vec![1.5, -2.0, 0.25]));
        let d = tape.euclidean_distance(v, v).unwrap();
        assert_eq!(tape.item(d).unwrap(), 0.0);
        let g = tape.backward(d).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn uniform_cross_entropy_is_log_v() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(&[2, 7]));
        let ce = tape.cross_entropy(logits, &[3, 6]).unwrap();
        assert!(close(tape.item(ce).unwrap(), (7.0f64).ln(), 1e-12));
    }

    #[test]
    fn sum_of_scaled_has_constant_grad() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let loss = tape.sum(tape.scale(x, 3.0));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn distance_grad_is_unit_vector() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![3.0, 4.0]));
        let zero = tape.constant(&Tensor::zeros(&[2]));
        let d = tape.euclidean_distance(x, zero).unwrap();
        let g = tape.backward(d).unwrap();
        let gx = g.get(x).unwrap().data();
        assert!(close(gx[0], 0.6, 1e-15) && close(gx[1], 0.8, 1e-15));
    }

    #[test]
    fn backward_twice_errors() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn non_scalar_loss_errors() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 5.0, 2.0]));
        let y = tape.masked_softmax(x, Some(&[true, false, true])).unwrap();
        let v = tape.value(y);
        assert_eq!(v.data()[1], 0.0);
        assert!(close(v.data()[0] + v.data()[2], 1.0, 1e-15));
    }

    #[test]
    fn unused_param_gets_no_grad() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(1.0));
        let unused = tape.param(&Tensor::zeros(&[3]));
        let loss = tape.scale(x, 2.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).data(), &[0.0; 3]);
    }
}
