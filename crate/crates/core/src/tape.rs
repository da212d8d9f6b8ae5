//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every op executed through it. [`Tape::backward`]
//! walks the record in reverse, producing a gradient for every node that
//! lies on a path to the loss. Trainable tensors live in a [`ParamStore`];
//! the tape borrows them for the duration of one forward/backward pass.
//!
//! Ops accept rank-1 inputs or, where noted, rank-2 `[batch, width]`
//! inputs that are processed row by row with no cross-row coupling.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::linalg::gemm;
use crate::tensor::{silu, silu_grad, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors with matching-shape gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds the parameter gradients of a backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.params {
            self.grads[id.0].add_assign(g);
        }
    }

    /// Parameter values and their gradient accumulators, for optimizers.
    pub fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.values.iter_mut().zip(self.grads.iter())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { w: usize, b: usize, x: usize },
    Silu { x: usize },
    Concat { parts: Vec<usize> },
    Mse { pred: usize, target: usize },
    LogSumExp { x: usize },
    MatmulNt { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sub { a: usize, b: usize },
    Mean { x: usize },
    Sum { x: usize },
    Diagonal { x: usize },
    NormalizeRows { x: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    param: Option<ParamId>,
}

pub struct Tape<'p> {
    id: u64,
    nodes: Vec<Node<'p>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, op_name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Records an input value. Gradients with respect to it are reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(Cow::Owned(value), Op::Leaf, "leaf")
    }

    /// Records a borrowed parameter from `store`.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Result<Var, TensorError> {
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Leaf, "param")?;
        self.nodes[v.index].param = Some(id);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, TensorError> {
        Ok(self.val(self.idx(v)?))
    }

    /// `y = W x + b` for `x: [in]`, or row-wise for `x: [batch, in]`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "affine";
        let (wi, bi, xi) = (self.idx(w)?, self.idx(b)?, self.idx(x)?);
        let (wt, bt, xt) = (self.val(wi), self.val(bi), self.val(xi));
        let [out, inp] = *wt.shape() else {
            return Err(TensorError::shape(OP, format!("weight must be rank 2, got {:?}", wt.shape())));
        };
        if bt.shape() != [out] {
            return Err(TensorError::shape(OP, format!("bias {:?} vs {out} outputs", bt.shape())));
        }
        let (batch, width) = xt
            .as_rows()
            .ok_or_else(|| TensorError::shape(OP, format!("input must be rank 1 or 2, got {:?}", xt.shape())))?;
        if width != inp {
            return Err(TensorError::shape(OP, format!("input width {width} vs weight in-dim {inp}")));
        }
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(bt.data());
        }
        gemm(batch, inp, out, xt.data(), false, wt.data(), true, 1.0, &mut y);
        let shape = if xt.rank() == 1 { vec![out] } else { vec![batch, out] };
        let y = Tensor::new(shape, y)?;
        self.push(Cow::Owned(y), Op::Affine { w: wi, b: bi, x: xi }, OP)
    }

    /// Elementwise `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let y = self.val(xi).map(silu);
        self.push(Cow::Owned(y), Op::Silu { x: xi }, "silu")
    }

    /// Concatenation along the last axis. Parts must share rank (1 or 2)
    /// and, for rank 2, the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "concat";
        if parts.is_empty() {
            return Err(TensorError::contract(OP, "empty input list"));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let rank = self.val(idxs[0]).rank();
        let mut rows = None;
        let mut total = 0;
        for &i in &idxs {
            let t = self.val(i);
            if t.rank() != rank {
                return Err(TensorError::shape(OP, "parts differ in rank"));
            }
            let (r, c) = t
                .as_rows()
                .ok_or_else(|| TensorError::shape(OP, format!("unsupported rank {}", t.rank())))?;
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::shape(OP, "parts differ in leading dimension"));
            }
            total += c;
        }
        let rows = rows.unwrap_or(1);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let y = Tensor::new(shape, data)?;
        self.push(Cow::Owned(y), Op::Concat { parts: idxs }, OP)
    }

    /// Mean over all elements of `(pred - target)²`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        let (p, t) = (self.val(pi), self.val(ti));
        if p.shape() != t.shape() {
            return Err(TensorError::shape("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.numel().max(1) as f64;
        let s = compensated_sum(p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)));
        self.push(Cow::Owned(Tensor::scalar(s / n)), Op::Mse { pred: pi, target: ti }, "mse")
    }

    /// `log Σ exp(x)` with max-shift. Rank-1 input gives a scalar; rank-2
    /// input gives one value per row.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "logsumexp";
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let (rows, cols) = t
            .as_rows()
            .ok_or_else(|| TensorError::shape(OP, format!("rank {} unsupported", t.rank())))?;
        if cols == 0 {
            return Err(TensorError::contract(OP, "empty input"));
        }
        let out: Vec<f64> = (0..rows).map(|r| lse(t.row(r))).collect();
        let y = if t.rank() == 1 {
            Tensor::scalar(out[0])
        } else {
            Tensor::vector(out)
        };
        self.push(Cow::Owned(y), Op::LogSumExp { x: xi }, OP)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "matmul_nt";
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (at, bt) = (self.val(ai), self.val(bi));
        let (&[m, k], &[n, k2]) = (at.shape(), bt.shape()) else {
            return Err(TensorError::shape(OP, "operands must be rank 2"));
        };
        if k != k2 {
            return Err(TensorError::shape(OP, format!("inner dims {k} vs {k2}")));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, at.data(), false, bt.data(), true, 0.0, &mut c);
        let y = Tensor::matrix(m, n, c)?;
        self.push(Cow::Owned(y), Op::MatmulNt { a: ai, b: bi }, OP)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let y = self.val(xi).map(|v| v * c);
        self.push(Cow::Owned(y), Op::Scale { x: xi, c }, "scale")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (at, bt) = (self.val(ai), self.val(bi));
        if at.shape() != bt.shape() {
            return Err(TensorError::shape("sub", format!("{:?} vs {:?}", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x - y).collect();
        let y = Tensor::new(at.shape().to_vec(), data)?;
        self.push(Cow::Owned(y), Op::Sub { a: ai, b: bi }, "sub")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        if t.numel() == 0 {
            return Err(TensorError::contract("mean", "empty input"));
        }
        let m = compensated_sum(t.data().iter().copied()) / t.numel() as f64;
        self.push(Cow::Owned(Tensor::scalar(m)), Op::Mean { x: xi }, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let s = compensated_sum(self.val(xi).data().iter().copied());
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum { x: xi }, "sum")
    }

    /// Main diagonal of a square matrix.
    pub fn diagonal(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let &[n, m] = t.shape() else {
            return Err(TensorError::shape("diagonal", "input must be rank 2"));
        };
        if n != m {
            return Err(TensorError::shape("diagonal", format!("{n}x{m} is not square")));
        }
        let d = (0..n).map(|i| t.data()[i * n + i]).collect();
        self.push(Cow::Owned(Tensor::vector(d)), Op::Diagonal { x: xi }, "diagonal")
    }

    /// Scales every row (or the single rank-1 vector) to unit norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "normalize_rows";
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let (rows, cols) = t
            .as_rows()
            .ok_or_else(|| TensorError::shape(OP, "input must be rank 1 or 2"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::contract(OP, format!("row {r} has zero norm")));
            }
            data.extend(row.iter().map(|v| v / n));
        }
        let y = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Cow::Owned(y), Op::NormalizeRows { x: xi }, OP)
    }

    /// Reverse-mode pass from a scalar `loss`. A tape supports one backward
    /// pass; a second call fails with [`TensorError::AlreadyBackpropagated`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        let li = self.idx(loss)?;
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let loss_shape = self.val(li).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::filled(&loss_shape, 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads[i].as_ref()) else {
                continue;
            };
            match params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => params.push((id, g.clone())),
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut add = |j: usize, d: Tensor| match &mut grads[j] {
            Some(acc) => acc.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let value = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { w, b, x } => {
                let (wt, xt) = (self.val(*w), self.val(*x));
                let [out, inp] = *wt.shape() else { unreachable!() };
                let (batch, _) = xt.as_rows().expect("affine input rank");
                let mut dx = vec![0.0; batch * inp];
                gemm(batch, out, inp, g.data(), false, wt.data(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; out * inp];
                gemm(out, batch, inp, g.data(), true, xt.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; out];
                for r in 0..batch {
                    for (acc, v) in db.iter_mut().zip(&g.data()[r * out..(r + 1) * out]) {
                        *acc += v;
                    }
                }
                add(*x, Tensor::new(xt.shape().to_vec(), dx).expect("dx shape"));
                add(*w, Tensor::new(vec![out, inp], dw).expect("dw shape"));
                add(*b, Tensor::vector(db));
            }
            Op::Silu { x } => {
                let xt = self.val(*x);
                let d = xt.data().iter().zip(g.data()).map(|(&v, &gv)| gv * silu_grad(v)).collect();
                add(*x, Tensor::new(xt.shape().to_vec(), d).expect("silu grad"));
            }
            Op::Concat { parts } => {
                let (rows, total) = value.as_rows().expect("concat rank");
                let mut offset = 0;
                for &p in parts {
                    let pt = self.val(p);
                    let (_, w) = pt.as_rows().expect("concat part rank");
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    add(p, Tensor::new(pt.shape().to_vec(), d).expect("concat grad"));
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.val(*pred), self.val(*target));
                let s = 2.0 * g.item() / p.numel().max(1) as f64;
                let dp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| s * (a - b)).collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                add(*pred, Tensor::new(p.shape().to_vec(), dp).expect("mse grad"));
                add(*target, Tensor::new(t.shape().to_vec(), dt).expect("mse grad"));
            }
            Op::LogSumExp { x } => {
                let xt = self.val(*x);
                let (rows, cols) = xt.as_rows().expect("lse rank");
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = xt.row(r);
                    let l = value.data()[r];
                    let gr = g.data()[r];
                    d.extend(row.iter().map(|&v| gr * (v - l).exp()));
                }
                add(*x, Tensor::new(xt.shape().to_vec(), d).expect("lse grad"));
            }
            Op::MatmulNt { a, b } => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let (&[m, k], &[n, _]) = (at.shape(), bt.shape()) else { unreachable!() };
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bt.data(), false, 0.0, &mut da);
                let mut db = vec![0.0; n * k];
                gemm(n, m, k, g.data(), true, at.data(), false, 0.0, &mut db);
                add(*a, Tensor::matrix(m, k, da).expect("matmul grad"));
                add(*b, Tensor::matrix(n, k, db).expect("matmul grad"));
            }
            Op::Scale { x, c } => add(*x, g.map(|v| v * c)),
            Op::Sub { a, b } => {
                add(*a, g.clone());
                add(*b, g.map(|v| -v));
            }
            Op::Mean { x } => {
                let xt = self.val(*x);
                add(*x, Tensor::filled(xt.shape(), g.item() / xt.numel() as f64));
            }
            Op::Sum { x } => {
                let xt = self.val(*x);
                add(*x, Tensor::filled(xt.shape(), g.item()));
            }
            Op::Diagonal { x } => {
                let xt = self.val(*x);
                let n = xt.shape()[0];
                let mut d = Tensor::zeros(xt.shape());
                for r in 0..n {
                    d.data_mut()[r * n + r] = g.data()[r];
                }
                add(*x, d);
            }
            Op::NormalizeRows { x } => {
                let xt = self.val(*x);
                let (rows, cols) = xt.as_rows().expect("normalize rank");
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let xr = xt.row(r);
                    let yr = value.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &gv)| (gv - y * yg) / n));
                }
                add(*x, Tensor::new(xt.shape().to_vec(), d).expect("normalize grad"));
            }
        }
    }
}

/// Neumaier summation. Scalar losses feed finite-difference checks, where
/// naive accumulation error swamps the perturbation.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + carry
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, or `None` when the value
    /// does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.index).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient for `id`, or zeros of the parameter's shape when it was not
    /// on the path to the loss.
    pub fn param_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }
}
