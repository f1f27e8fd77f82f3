//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every operation appends a node holding its output value. A node keeps its
//! operation (and therefore its inputs) only when at least one input needs a
//! gradient, so inference on a tape without trainable leaves records values
//! alone. [`Tape::backward`] walks the nodes in reverse insertion order, which
//! is a valid topological order because inputs always precede consumers.
//!
//! Sums are accumulated sequentially in row-major order, so results are
//! bitwise reproducible for identical inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Permute {
        src: Var,
        axes: Vec<usize>,
    },
    SumAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mask {
        src: Var,
        mask: Vec<T>,
    },
    Pick {
        src: Var,
        index: usize,
    },
    Gru(GruCache<T>),
}

struct GruCache<T> {
    x: Var,
    h: Var,
    w: Var,
    b: Var,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record. Parameters are borrowed from a [`ParamStore`]
/// rather than copied.
pub struct Tape<'p, T> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    params_need_grad: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to a leaf created by [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// One gradient per parameter of the attached store, in store order.
    /// Parameters the loss does not reach get zeros.
    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, s, &[0, 0])),
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, x: &[T]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-wise softmax of a `[rows, cols]` buffer.
pub(crate) fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / s;
        }
    }
    out
}

/// Row-wise log-softmax of a `[rows, cols]` buffer.
pub(crate) fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &v in src {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v - lse;
        }
    }
    out
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            params_need_grad: false,
        }
    }

    /// A tape that can read parameters from `store`. With
    /// `requires_grad`, backward produces a gradient for every parameter.
    pub fn with_params(store: &'p ParamStore<T>, requires_grad: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(store),
            param_vars: vec![None; store.len()],
            params_need_grad: requires_grad,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= mark) {
                *slot = None;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("parameter store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.params_need_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x != T::zero() {
                    axpy(row, x, &bv[p * n..(p + 1) * n]);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// `a[m, n] + b[1, n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = dims2("add_row", self.value(a))?;
        let (r, n2) = dims2("add_row", self.value(b))?;
        if r != 1 || n != n2 {
            return Err(shape_err("add_row", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(bv) {
                *o += v;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = scale * *o + shift;
        }
        let needs = self.needs(x);
        self.push(out, Op::Affine(x, scale), needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Shape {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (r0, c0) = dims2("concat", self.value(first))?;
        let mut total = 0;
        for &v in inputs {
            let (r, c) = dims2("concat", self.value(v))?;
            match axis {
                0 if c == c0 => total += r,
                1 if r == r0 => total += c,
                _ => return Err(shape_err("concat", self.shape(first), self.shape(v))),
            }
        }
        let shape = if axis == 0 { [total, c0] } else { [r0, total] };
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        if axis == 0 {
            for &v in inputs {
                out.extend_from_slice(self.value(v).data());
            }
        } else {
            for row in 0..r0 {
                for &v in inputs {
                    let t = self.value(v);
                    let c = t.cols();
                    out.extend_from_slice(&t.data()[row * c..(row + 1) * c]);
                }
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2("slice", self.value(src))?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(shape_err("slice", self.shape(src), &[start, len]));
        }
        let d = self.value(src).data();
        let (shape, out) = if axis == 0 {
            ([len, c], d[start * c..(start + len) * c].to_vec())
        } else {
            let mut o = Vec::with_capacity(r * len);
            for row in 0..r {
                o.extend_from_slice(&d[row * c + start..row * c + start + len]);
            }
            ([r, len], o)
        };
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice { src, axis, start },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Generalized transpose: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(shape_err("permute", &shape, axes));
        }
        for &a in axes {
            if core::mem::replace(&mut seen[a], true) {
                return Err(shape_err("permute", &shape, axes));
            }
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_data(self.value(x).data(), &shape, axes);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                src: x,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = softmax_rows(t.data(), t.cols());
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = log_softmax_rows(t.data(), t.cols());
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::LogSoftmax(x), needs)
    }

    /// 1-D convolution: input `[c_in, len]`, weight `[c_out, c_in, k]`,
    /// bias `[c_out]`, zero padding on both ends.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c_in, len) = dims2("conv1d", self.value(input))?;
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        let [c_out, wc_in, k] = ws[..] else {
            return Err(shape_err("conv1d", self.shape(input), &ws));
        };
        if wc_in != c_in || bs != [c_out] || stride == 0 || len + 2 * padding < k {
            return Err(shape_err("conv1d", self.shape(input), &ws));
        }
        let out_len = (len + 2 * padding - k) / stride + 1;
        let (x, w, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); c_out * out_len];
        for co in 0..c_out {
            let orow = &mut out[co * out_len..(co + 1) * out_len];
            orow.iter_mut().for_each(|o| *o = b[co]);
            for ci in 0..c_in {
                let xrow = &x[ci * len..(ci + 1) * len];
                let wrow = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                for (t, o) in orow.iter_mut().enumerate() {
                    let base = t * stride;
                    for (j, &wv) in wrow.iter().enumerate() {
                        let pos = base + j;
                        if pos >= padding && pos - padding < len {
                            *o += wv * xrow[pos - padding];
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new([c_out, out_len], out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// 2-D convolution without padding: input `[c_in, h, w]`, weight
    /// `[c_out, c_in, kh, kw]`, bias `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: (usize, usize),
    ) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        let (&[c_in, h, w], &[c_out, wc_in, kh, kw]) = (&is[..], &ws[..]) else {
            return Err(shape_err("conv2d", &is, &ws));
        };
        if wc_in != c_in || bs != [c_out] || h < kh || w < kw || stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", &is, &ws));
        }
        let oh = (h - kh) / stride.0 + 1;
        let ow = (w - kw) / stride.1 + 1;
        let (x, wt, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); c_out * oh * ow];
        for co in 0..c_out {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.iter_mut().for_each(|o| *o = b[co]);
            for ci in 0..c_in {
                let kern = &wt[((co * c_in + ci) * kh) * kw..((co * c_in + ci + 1) * kh) * kw];
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = T::zero();
                        for a in 0..kh {
                            let xr = &xin[(i * stride.0 + a) * w + j * stride.1..][..kw];
                            s += dot(&kern[a * kw..(a + 1) * kw], xr);
                        }
                        plane[i * ow + j] += s;
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new([c_out, oh, ow], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            needs,
        ))
    }

    /// Gathers rows of `table[v, e]` into `[ids.len(), e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = dims2("embedding", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&d[i * e..(i + 1) * e]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new([ids.len(), e], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Multiplies by a fixed mask (dropout with the scaling folded in).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("mask", self.shape(x), &[mask.len()]));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Mask { src: x, mask }, needs))
    }

    /// The element at flat `index`, as a `[1, 1]` scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.len() {
            return Err(shape_err("pick", t.shape(), &[index]));
        }
        let v = t.data()[index];
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { src: x, index }, needs))
    }

    /// One GRU update with gate order (reset, update, candidate):
    ///
    /// ```text
    /// a = h·W + b            (W: [H, 3H], b: [1, 3H])
    /// r = σ(x_r + a_r)   z = σ(x_z + a_z)
    /// n = tanh(x_n + r ⊙ a_n)
    /// h' = (1 − z) ⊙ n + z ⊙ h
    /// ```
    ///
    /// `x` is the already projected input `[1, 3H]`.
    pub fn gru_step(&mut self, x: Var, h: Var, w: Var, b: Var) -> Result<Var> {
        let (_, hid) = dims2("gru_step", self.value(h))?;
        let expect = [1, 3 * hid];
        if self.shape(x) != expect || self.shape(b) != expect {
            return Err(shape_err("gru_step", self.shape(x), self.shape(b)));
        }
        if self.shape(h) != [1, hid] || self.shape(w) != [hid, 3 * hid] {
            return Err(shape_err("gru_step", self.shape(h), self.shape(w)));
        }
        let (xv, hv, wv, bv) = (
            self.value(x).data(),
            self.value(h).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut a = bv.to_vec();
        for (p, &hp) in hv.iter().enumerate() {
            if hp != T::zero() {
                axpy(&mut a, hp, &wv[p * 3 * hid..(p + 1) * 3 * hid]);
            }
        }
        let mut r = vec![T::zero(); hid];
        let mut z = vec![T::zero(); hid];
        let mut n = vec![T::zero(); hid];
        let mut out = vec![T::zero(); hid];
        for j in 0..hid {
            r[j] = sigmoid(xv[j] + a[j]);
            z[j] = sigmoid(xv[hid + j] + a[hid + j]);
            n[j] = (xv[2 * hid + j] + r[j] * a[2 * hid + j]).tanh();
            out[j] = (T::one() - z[j]) * n[j] + z[j] * hv[j];
        }
        let needs = self.needs(x) || self.needs(h) || self.needs(w) || self.needs(b);
        let hn = a[2 * hid..].to_vec();
        Ok(self.push(
            Tensor::new([1, hid], out)?,
            Op::Gru(GruCache {
                x,
                h,
                w,
                b,
                r,
                z,
                n,
                hn,
            }),
            needs,
        ))
    }

    // ---- reverse pass ----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..count).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let shapes = (0..count).map(|i| self.value(Var(i)).shape().to_vec()).collect();
        let params = match self.params {
            Some(store) => store
                .iter()
                .map(|(id, _, t)| {
                    let g = self.param_vars[id.0]
                        .filter(|v| v.0 < count)
                        .and_then(|v| grads[v.0].clone());
                    match g {
                        Some(g) => Tensor::new(t.shape().to_vec(), g).expect("param grad"),
                        None => Tensor::zeros(t.shape().to_vec()),
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Grads {
            nodes: grads,
            shapes,
            params,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i)).data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x != T::zero() {
                                axpy(&mut gb[p * n..(p + 1) * n], x, grow);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        axpy(gv, T::one(), g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, T::one(), g);
                }
                let n = self.value(*b).cols();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        axpy(gb, T::one(), row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, *scale, g);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (T::one() - y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let total_cols = self.value(Var(i)).cols();
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = (self.value(v).rows(), self.value(v).cols());
                    if let Some(gv) = self.acc(grads, v) {
                        if *axis == 0 {
                            axpy(gv, T::one(), &g[offset * c..(offset + r) * c]);
                        } else {
                            for row in 0..r {
                                let src = &g[row * total_cols + offset..][..c];
                                axpy(&mut gv[row * c..(row + 1) * c], T::one(), src);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { src, axis, start } => {
                let c = self.value(*src).cols();
                let this = self.value(Var(i));
                let (r_out, c_out) = (this.rows(), this.cols());
                if let Some(gs) = self.acc(grads, *src) {
                    if *axis == 0 {
                        axpy(&mut gs[start * c..(start + r_out) * c], T::one(), g);
                    } else {
                        for row in 0..r_out {
                            axpy(
                                &mut gs[row * c + start..row * c + start + c_out],
                                T::one(),
                                &g[row * c_out..(row + 1) * c_out],
                            );
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(gx) = self.acc(grads, *x) {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, T::one(), g);
                }
            }
            Op::Permute { src, axes } => {
                let out_shape = self.shape(Var(i)).to_vec();
                let mut inverse = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inverse[a] = o;
                }
                let back = permute_data(g, &out_shape, &inverse);
                if let Some(gs) = self.acc(grads, *src) {
                    axpy(gs, T::one(), &back);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((dx, gy), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let s = dot(gy, y);
                        for ((d, &gi), &yi) in dx.iter_mut().zip(gy).zip(y) {
                            *d += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((dx, gy), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let mut s = T::zero();
                        for &gi in gy {
                            s += gi;
                        }
                        for ((d, &gi), &yi) in dx.iter_mut().zip(gy).zip(y) {
                            *d += gi - yi.exp() * s;
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (c_in, len) = (self.value(*input).rows(), self.value(*input).cols());
                let ws = self.shape(*weight);
                let (c_out, k) = (ws[0], ws[2]);
                let out_len = self.value(Var(i)).cols();
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                if let Some(gb) = self.acc(grads, *bias) {
                    for co in 0..c_out {
                        for &gi in &g[co * out_len..(co + 1) * out_len] {
                            gb[co] += gi;
                        }
                    }
                }
                let tap = |t: usize, j: usize| {
                    let pos = t * stride + j;
                    (pos >= *padding && pos - padding < len).then(|| pos - padding)
                };
                if let Some(gw) = self.acc(grads, *weight) {
                    for co in 0..c_out {
                        let grow = &g[co * out_len..(co + 1) * out_len];
                        for ci in 0..c_in {
                            let xrow = &x[ci * len..(ci + 1) * len];
                            for j in 0..k {
                                let mut s = T::zero();
                                for (t, &gi) in grow.iter().enumerate() {
                                    if let Some(p) = tap(t, j) {
                                        s += gi * xrow[p];
                                    }
                                }
                                gw[(co * c_in + ci) * k + j] += s;
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    for co in 0..c_out {
                        let grow = &g[co * out_len..(co + 1) * out_len];
                        for ci in 0..c_in {
                            let wrow = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            for (t, &gi) in grow.iter().enumerate() {
                                for (j, &wv) in wrow.iter().enumerate() {
                                    if let Some(p) = tap(t, j) {
                                        gx[ci * len + p] += gi * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let is = self.shape(*input);
                let (c_in, h, w) = (is[0], is[1], is[2]);
                let ws = self.shape(*weight);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.shape(Var(i));
                let (oh, ow) = (os[1], os[2]);
                let (x, wt) = (self.value(*input).data(), self.value(*weight).data());
                if let Some(gb) = self.acc(grads, *bias) {
                    for co in 0..c_out {
                        for &gi in &g[co * oh * ow..(co + 1) * oh * ow] {
                            gb[co] += gi;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *weight) {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            let xin = &x[ci * h * w..(ci + 1) * h * w];
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let mut s = T::zero();
                                    for oi in 0..oh {
                                        for oj in 0..ow {
                                            s += g[(co * oh + oi) * ow + oj]
                                                * xin[(oi * stride.0 + a) * w + oj * stride.1 + bb];
                                        }
                                    }
                                    gw[((co * c_in + ci) * kh + a) * kw + bb] += s;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let gi = g[(co * oh + oi) * ow + oj];
                                    for a in 0..kh {
                                        for bb in 0..kw {
                                            gx[(ci * h + oi * stride.0 + a) * w + oj * stride.1 + bb] +=
                                                gi * wt[((co * c_in + ci) * kh + a) * kw + bb];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let e = self.value(*table).cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * e..(id + 1) * e], T::one(), &g[row * e..(row + 1) * e]);
                    }
                }
            }
            Op::Mask { src, mask } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for ((d, &gi), &m) in gs.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Pick { src, index } => {
                if let Some(gs) = self.acc(grads, *src) {
                    gs[*index] += g[0];
                }
            }
            Op::Gru(c) => self.gru_backward(c, g, grads),
        }
    }

    fn gru_backward(&self, c: &GruCache<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let hid = g.len();
        let hv = self.value(c.h).data();
        let wv = self.value(c.w).data();
        let one = T::one();
        // Pre-activation gradients, laid out [r | z | n] like the gates.
        let mut dx = vec![T::zero(); 3 * hid];
        let mut da = vec![T::zero(); 3 * hid];
        let mut dh = vec![T::zero(); hid];
        for j in 0..hid {
            let (r, z, n) = (c.r[j], c.z[j], c.n[j]);
            let dz = g[j] * (hv[j] - n);
            let dn = g[j] * (one - z);
            dh[j] = g[j] * z;
            let dn_pre = dn * (one - n * n);
            let dr = dn_pre * c.hn[j];
            let dr_pre = dr * r * (one - r);
            let dz_pre = dz * z * (one - z);
            dx[j] = dr_pre;
            dx[hid + j] = dz_pre;
            dx[2 * hid + j] = dn_pre;
            da[j] = dr_pre;
            da[hid + j] = dz_pre;
            da[2 * hid + j] = dn_pre * r;
        }
        if let Some(gx) = self.acc(grads, c.x) {
            axpy(gx, one, &dx);
        }
        if let Some(gb) = self.acc(grads, c.b) {
            axpy(gb, one, &da);
        }
        if let Some(gw) = self.acc(grads, c.w) {
            for (p, &hp) in hv.iter().enumerate() {
                if hp != T::zero() {
                    axpy(&mut gw[p * 3 * hid..(p + 1) * 3 * hid], hp, &da);
                }
            }
        }
        if let Some(gh) = self.acc(grads, c.h) {
            for p in 0..hid {
                gh[p] += dh[p] + dot(&da, &wv[p * 3 * hid..(p + 1) * 3 * hid]);
            }
        }
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &t(&[&[3.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([2, 3]));
        let y = tape.tanh(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_conv2d_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(Tensor::new([2, 3, 4], data.clone()).unwrap());
        // Two output channels, each copying one input channel.
        let w = tape.constant(Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.conv2d(x, w, b, (1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn softmax_uniform_and_known_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row(vec![0.0; 3]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x);
        // e^x / Σ e^x evaluated by hand.
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (v, e) in tape.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row(vec![1000.0, 0.0]));
        let y = tape.log_softmax(x);
        let v = tape.value(y).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] + 1000.0).abs() < 1e-9);
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let y = tape.log_softmax(x);
        for &v in tape.value(y).data() {
            assert!((v + core::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::zeros([1, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(5.0));
        let mut tape = Tape::with_params(&store, true);
        let av = tape.param(a);
        let y = tape.mul(av, av).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params()[0].data(), &[4.0]);
        assert_eq!(g.params()[1].data(), &[0.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.tanh(a);
        assert!(matches!(tape.nodes[b.0].op, Op::Leaf));
        assert!(!tape.nodes[b.0].needs_grad);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::new([2, 3, 4], data.clone()).unwrap());
        let y = tape.permute(x, &[1, 2, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 2]);
        // y[1][2][1] == x[1][1][2]
        let (i, j, k) = (1, 2, 1);
        assert_eq!(tape.value(y).data()[(i * 4 + j) * 2 + k], data[(k * 3 + i) * 4 + j]);
        let z = tape.permute(y, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn truncate_forgets_params_added_later() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(2.0));
        let mut tape = Tape::with_params(&store, false);
        let mark = tape.len();
        let v = tape.param(a);
        tape.truncate(mark);
        let w = tape.param(a);
        assert_eq!(v, w);
        assert_eq!(tape.len(), 1);
    }
}
