//! Differentiable primitives on [`Var`].

use super::{Backward, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Result shape of a trailing-dimension broadcast, or an error. One operand
/// must equal the other, be a one-element tensor, or be a suffix of the
/// other's shape.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 {
        return Ok(if a.len() >= b.len() { a.to_vec() } else { b.to_vec() });
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    shape_err(format!("cannot broadcast {a:?} with {b:?}"))
}

/// Folds a full-size gradient back onto an operand of `n` elements that was
/// repeated cyclically (trailing broadcast or scalar).
fn reduce_cyclic(full: &[f64], n: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; n];
    for chunk in full.chunks(n) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::new(shape, out).expect("reduced gradient matches operand shape")
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinaryKind,
}

impl Backward for Binary {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd, g) = (a.data(), b.data(), grad.data());
        let n = g.len();
        let mut ga = vec![0.0; n];
        let mut gb = vec![0.0; n];
        for i in 0..n {
            let (x, y) = (ad[i % na], bd[i % nb]);
            let (dx, dy) = match self.kind {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (y, x),
                BinaryKind::Div => (1.0 / y, -x / (y * y)),
            };
            ga[i] = g[i] * dx;
            gb[i] = g[i] * dy;
        }
        vec![
            Some(reduce_cyclic(&ga, na, a.shape())),
            Some(reduce_cyclic(&gb, nb, b.shape())),
        ]
    }
}

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Square,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Neg => -x,
            Self::Scale(c) => c * x,
            Self::AddScalar(c) => x + c,
            Self::Exp => x.exp(),
            Self::Log => x.ln(),
            Self::Tanh => x.tanh(),
            Self::Sigmoid => sigmoid(x),
            Self::Relu => x.max(0.0),
            Self::Softplus => softplus(x),
            Self::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Neg => -1.0,
            Self::Scale(c) => c,
            Self::AddScalar(_) => 1.0,
            Self::Exp => y,
            Self::Log => 1.0 / x,
            Self::Tanh => 1.0 - y * y,
            Self::Sigmoid => y * (1.0 - y),
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Softplus => sigmoid(x),
            Self::Square => 2.0 * x,
        }
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

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Unary {
    kind: UnaryKind,
}

impl Backward for Unary {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.kind.derivative(x, y))
            .collect();
        vec![Some(Tensor::new(x.shape(), data).expect("same shape"))]
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// `out[m×n] += a[m×k] · b[k×n]`, row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatMul {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = vec![0.0; m * k];
        gemm_nt_acc(grad.data(), b.data(), &mut ga, m, k, n);
        let mut gb = vec![0.0; k * n];
        gemm_tn_acc(a.data(), grad.data(), &mut gb, m, k, n);
        vec![
            Some(Tensor::new(a.shape(), ga).expect("shape")),
            Some(Tensor::new(b.shape(), gb).expect("shape")),
        ]
    }
}

struct Transpose;

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

impl Backward for Transpose {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = inputs[0].shape();
        let data = transpose_data(grad.data(), s[1], s[0]);
        vec![Some(Tensor::new(s, data).expect("shape"))]
    }
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions
// ---------------------------------------------------------------------------

struct Reshape;

impl Backward for Reshape {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.reshape(inputs[0].shape()).expect("same numel"))]
    }
}

/// Rows `start..start+len` along axis 0.
struct Narrow {
    offset: usize,
}

impl Backward for Narrow {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        g.data_mut()[self.offset..self.offset + grad.numel()].copy_from_slice(grad.data());
        vec![Some(g)]
    }
}

struct Concat;

impl Backward for Concat {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut off = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                let g = Tensor::new(t.shape(), grad.data()[off..off + n].to_vec()).expect("shape");
                off += n;
                Some(g)
            })
            .collect()
    }
}

struct Sum;

impl Backward for Sum {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

/// Sum over axis 0: `[r, rest..] -> [rest..]`.
struct SumAxis0;

impl Backward for SumAxis0 {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let data = grad.data().iter().copied().cycle().take(x.numel()).collect();
        vec![Some(Tensor::new(x.shape(), data).expect("shape"))]
    }
}

/// Max over axis 0, routing the gradient to the (first) arg-max row.
struct MaxAxis0 {
    argmax: Vec<usize>,
}

impl Backward for MaxAxis0 {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        for (&src, &gv) in self.argmax.iter().zip(grad.data()) {
            g.data_mut()[src] += gv;
        }
        vec![Some(g)]
    }
}

/// Multiplies `[p.., c]` by a weight per leading position `[p..]`.
struct MulLeading {
    inner: usize,
}

impl Backward for MulLeading {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let c = self.inner;
        let mut gx = vec![0.0; x.numel()];
        let mut gw = vec![0.0; w.numel()];
        for (p, &wv) in w.data().iter().enumerate() {
            for j in p * c..(p + 1) * c {
                gx[j] = grad.data()[j] * wv;
                gw[p] += grad.data()[j] * x.data()[j];
            }
        }
        vec![
            Some(Tensor::new(x.shape(), gx).expect("shape")),
            Some(Tensor::new(w.shape(), gw).expect("shape")),
        ]
    }
}

// ---------------------------------------------------------------------------
// Softmax family (over the last axis)
// ---------------------------------------------------------------------------

pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

struct Softmax {
    width: usize,
}

impl Backward for Softmax {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let w = self.width;
        let mut g = vec![0.0; out.numel()];
        for ((gr, yr), dr) in g.chunks_mut(w).zip(out.data().chunks(w)).zip(grad.data().chunks(w)) {
            let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
            for ((gi, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                *gi = y * (d - dot);
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), g).expect("shape"))]
    }
}

struct LogSoftmax {
    width: usize,
}

impl Backward for LogSoftmax {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let w = self.width;
        let mut g = vec![0.0; out.numel()];
        for ((gr, yr), dr) in g.chunks_mut(w).zip(out.data().chunks(w)).zip(grad.data().chunks(w)) {
            let total: f64 = dr.iter().sum();
            for ((gi, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                *gi = d - y.exp() * total;
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), g).expect("shape"))]
    }
}

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            let data = (0..n)
                .map(|i| {
                    let (x, y) = (ad[i % na], bd[i % nb]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect();
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.record(value, &[self, other], Binary { kind }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let value = self.value_ref().map(|x| kind.apply(x));
        self.tape.record(value, &[self], Unary { kind })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value_ref().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(UnaryKind::Log))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// `max(0, x)`.
    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    /// Matrix product. A rank-1 left operand is a row vector, a rank-1 right
    /// operand a column vector; the corresponding axis is dropped from the result.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, m, k, n) = {
            let a = self.value_ref();
            let b = other.value_ref();
            let (m, k, row_vec) = match a.shape() {
                [k] => (1, *k, true),
                [m, k] => (*m, *k, false),
                s => return shape_err(format!("matmul lhs must be rank 1 or 2, got {s:?}")),
            };
            let (k2, n, col_vec) = match b.shape() {
                [k] if !row_vec => (*k, 1, true),
                [k, n] => (*k, *n, false),
                s => return shape_err(format!("matmul rhs shape {s:?} unsupported for lhs {:?}", a.shape())),
            };
            if k != k2 {
                return shape_err(format!("matmul inner dims {:?} x {:?}", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            let shape: Vec<usize> = match (row_vec, col_vec) {
                (true, _) => vec![n],
                (_, true) => vec![m],
                _ => vec![m, n],
            };
            (Tensor::new(&shape, out)?, m, k, n)
        };
        Ok(self.tape.record(value, &[self, other], MatMul { m, k, n }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.value_ref();
            let &[r, c] = a.shape() else {
                return shape_err(format!("transpose needs rank 2, got {:?}", a.shape()));
            };
            Tensor::new(&[c, r], transpose_data(a.data(), r, c))?
        };
        Ok(self.tape.record(value, &[self], Transpose))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value_ref().reshape(shape)?;
        Ok(self.tape.record(value, &[self], Reshape))
    }

    pub fn flatten(self) -> Result<Var<'t>> {
        let n = self.numel();
        self.reshape(&[n])
    }

    /// Slices `len` entries of axis 0 starting at `start`.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, offset) = {
            let a = self.value_ref();
            let Some(&rows) = a.shape().first() else {
                return shape_err("narrow on a rank-0 tensor");
            };
            if len == 0 || start + len > rows {
                return shape_err(format!("narrow {start}+{len} out of range for {:?}", a.shape()));
            }
            let inner: usize = a.shape()[1..].iter().product();
            let mut shape = a.shape().to_vec();
            shape[0] = len;
            let data = a.data()[start * inner..(start + len) * inner].to_vec();
            (Tensor::new(&shape, data)?, start * inner)
        };
        Ok(self.tape.record(value, &[self], Narrow { offset }))
    }

    /// Entry `i` of a rank-1 tensor as a rank-0 scalar.
    pub fn select(self, i: usize) -> Result<Var<'t>> {
        self.narrow(i, 1)?.reshape(&[])
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
            let tail = vals[0].shape().get(1..).unwrap_or(&[]).to_vec();
            if vals[0].rank() == 0 {
                return shape_err("concat of rank-0 tensors");
            }
            let mut rows = 0;
            let mut data = Vec::new();
            for v in &vals {
                if v.rank() == 0 || v.shape()[1..] != tail[..] {
                    return shape_err(format!("concat trailing extents differ: {:?}", v.shape()));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(&shape, data)?
        };
        Ok(first.tape.record(value, parts, Concat))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value_ref().sum());
        self.tape.record(value, &[self], Sum)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis0(self) -> Result<Var<'t>> {
        let value = {
            let a = self.value_ref();
            if a.rank() == 0 {
                return shape_err("sum_axis0 on rank-0 tensor");
            }
            let tail = &a.shape()[1..];
            let inner: usize = tail.iter().product();
            let mut out = vec![0.0; inner];
            for row in a.data().chunks(inner) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new(tail, out)?
        };
        Ok(self.tape.record(value, &[self], SumAxis0))
    }

    pub fn mean_axis0(self) -> Result<Var<'t>> {
        let rows = *self.shape().first().unwrap_or(&1) as f64;
        Ok(self.sum_axis0()?.scale(1.0 / rows))
    }

    pub fn max_axis0(self) -> Result<Var<'t>> {
        let (value, argmax) = {
            let a = self.value_ref();
            if a.rank() == 0 {
                return shape_err("max_axis0 on rank-0 tensor");
            }
            let tail = &a.shape()[1..];
            let inner: usize = tail.iter().product();
            let mut best = a.data()[..inner].to_vec();
            let mut arg: Vec<usize> = (0..inner).collect();
            for (r, row) in a.data().chunks(inner).enumerate().skip(1) {
                for (j, &v) in row.iter().enumerate() {
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = r * inner + j;
                    }
                }
            }
            (Tensor::new(tail, best)?, arg)
        };
        Ok(self.tape.record(value, &[self], MaxAxis0 { argmax }))
    }

    /// `x[p.., c] * w[p..]`: one weight per leading position, shared over
    /// the trailing axis.
    pub fn mul_leading(self, w: Var<'t>) -> Result<Var<'t>> {
        let (value, inner) = {
            let x = self.value_ref();
            let wv = w.value_ref();
            let r = x.rank();
            if r == 0 || wv.shape() != &x.shape()[..r - 1] {
                return shape_err(format!("mul_leading: {:?} vs weights {:?}", x.shape(), wv.shape()));
            }
            let c = x.shape()[r - 1];
            let mut data = x.data().to_vec();
            for (p, &wp) in wv.data().iter().enumerate() {
                for v in &mut data[p * c..(p + 1) * c] {
                    *v *= wp;
                }
            }
            (Tensor::new(x.shape(), data)?, c)
        };
        Ok(self.tape.record(value, &[self, w], MulLeading { inner }))
    }

    fn last_axis(&self) -> Result<usize> {
        match self.shape().last() {
            Some(&w) => Ok(w),
            None => shape_err("softmax on rank-0 tensor"),
        }
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let width = self.last_axis()?;
        let value = {
            let a = self.value_ref();
            let mut out = vec![0.0; a.numel()];
            for (o, x) in out.chunks_mut(width).zip(a.data().chunks(width)) {
                softmax_slice(x, o);
            }
            Tensor::new(a.shape(), out)?
        };
        Ok(self.tape.record(value, &[self], Softmax { width }))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let width = self.last_axis()?;
        let value = {
            let a = self.value_ref();
            let mut out = vec![0.0; a.numel()];
            for (o, x) in out.chunks_mut(width).zip(a.data().chunks(width)) {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (oi, &xi) in o.iter_mut().zip(x) {
                    *oi = xi - lse;
                }
            }
            Tensor::new(a.shape(), out)?
        };
        Ok(self.tape.record(value, &[self], LogSoftmax { width }))
    }

    /// Zero-valued node whose gradient equals that of `self`; used for
    /// score-function surrogates.
    pub fn zero_valued(self) -> Result<Var<'t>> {
        let d = self.detach();
        self.sub(d)
    }
}

/// Row gather `[r, n] -> [k, n]`; repeated rows accumulate.
struct GatherRows {
    rows: Vec<usize>,
}

impl Backward for GatherRows {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let n = x.shape()[1];
        let mut g = Tensor::zeros(x.shape());
        for (k, &r) in self.rows.iter().enumerate() {
            for (d, s) in g.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&grad.data()[k * n..(k + 1) * n]) {
                *d += s;
            }
        }
        vec![Some(g)]
    }
}

impl<'t> Var<'t> {
    /// Rows `rows` of a rank-2 tensor, e.g. an embedding lookup.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value_ref();
            let &[r, n] = x.shape() else {
                return shape_err(format!("gather_rows wants rank 2, got {:?}", x.shape()));
            };
            if rows.is_empty() {
                return shape_err("gather_rows of zero rows");
            }
            let mut data = Vec::with_capacity(rows.len() * n);
            for &i in rows {
                if i >= r {
                    return shape_err(format!("row {i} out of range for {r} rows"));
                }
                data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
            }
            Tensor::new(&[rows.len(), n], data)?
        };
        Ok(self.tape.record(value, &[self], GatherRows { rows: rows.to_vec() }))
    }

    /// Row `i` of a rank-2 tensor as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let n = self.shape().get(1).copied().unwrap_or(0);
        self.gather_rows(&[i])?.reshape(&[n])
    }
}
