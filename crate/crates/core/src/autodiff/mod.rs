//! Minimal reverse-mode differentiation over dense float tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Handles ([`Var`]) are cheap copies tied to the tape
//! that created them. Only the operations needed by the ISP pipeline and its
//! selector networks are provided.

mod gradcheck;
pub(crate) mod kernels;

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

pub use gradcheck::{
    check_gradients, check_summed_gradients, GradCheckReport, GradCheckSettings, ProbeResult,
};
use kernels::{gemm, ConvGeom, Mat};

use crate::error::{invalid, mismatch, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Abs,
    Relu,
    Neg,
    Recip,
    Clamp(f32, f32),
}

/// Right-hand operand of an elementwise binary operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rhs<T = f32> {
    Var(Var),
    Const(T),
}

impl<T> From<Var> for Rhs<T> {
    fn from(v: Var) -> Self {
        Rhs::Var(v)
    }
}

impl<T: Real> From<f32> for Rhs<T> {
    fn from(v: f32) -> Self {
        Rhs::Const(T::lit(v))
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: Option<usize>,
        scalar: T,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    MulChannels {
        x: usize,
        gains: usize,
    },
    SafeInverseGain {
        x: usize,
        gains: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    Softmax {
        a: usize,
    },
    GlobalAvgPool {
        a: usize,
    },
    Affine {
        v: usize,
        weight: usize,
        bias: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Row {
        a: usize,
        row: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    ColumnNormalize {
        a: usize,
    },
    Inverse3 {
        a: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Inflection point of the highlight-preserving inverse gain.
pub const HIGHLIGHT_INFLECTION: f32 = 0.9;

/// Smallest |det| accepted by [`Tape::inverse3`].
pub const SINGULAR_EPS: f32 = 1e-8;

/// Records operations of a single forward pass.
pub struct Tape<T = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index as usize >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index as usize)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn node(&self, i: usize) -> &Node<T> {
        &self.nodes[i]
    }

    fn grad_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf (no gradient is tracked).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index as usize].requires_grad
    }

    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        let rhs: Rhs<T> = b.into();
        let ia = self.idx(a)?;
        let av = &self.node(ia).value;
        let (ib, bdata, scalar) = match rhs {
            Rhs::Var(bv) => {
                let ib = self.idx(bv)?;
                (Some(ib), Some(&self.node(ib).value), T::zero())
            }
            Rhs::Const(s) => (None, None, s),
        };
        if let Some(bt) = bdata {
            if bt.numel() != 1 && bt.shape() != av.shape() {
                return Err(mismatch("elementwise", av.shape(), bt.shape()));
            }
        }
        let rhs_at = |i: usize| -> T {
            match bdata {
                Some(bt) if bt.numel() == 1 => bt.data()[0],
                Some(bt) => bt.data()[i],
                None => scalar,
            }
        };
        let n = av.numel();
        let mut out = Vec::with_capacity(n);
        for (i, &x) in av.data().iter().enumerate() {
            let y = rhs_at(i);
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => {
                    if y == T::zero() {
                        return Err(Error::DivisionByZero);
                    }
                    x / y
                }
                BinaryKind::Pow => {
                    if x < T::zero() {
                        return Err(Error::NegativeBase(x.as_f32()));
                    }
                    x.powf(y)
                }
                BinaryKind::Max => x.max(y),
            });
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let mut ids = vec![ia];
        ids.extend(ib);
        let rg = self.grad_any(&ids);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                scalar,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn pow(&mut self, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        self.binary(BinaryKind::Pow, a, b)
    }

    pub fn max(&mut self, a: Var, b: impl Into<Rhs<T>>) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = &self.node(ia).value;
        if let UnaryKind::Recip = kind {
            if av.data().iter().any(|&v| v == T::zero()) {
                return Err(Error::DivisionByZero);
            }
        }
        let value = av.map(|x| match kind {
            UnaryKind::Abs => x.abs(),
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Neg => -x,
            UnaryKind::Recip => x.recip(),
            UnaryKind::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
        });
        let rg = self.node(ia).requires_grad;
        Ok(self.push(value, Op::Unary { kind, a: ia }, rg))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Recip, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", "lo > hi"));
        }
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    // ---- channel-wise gains --------------------------------------------

    fn check_gains(&self, op: &'static str, ix: usize, ig: usize) -> Result<usize> {
        let xs = self.node(ix).value.shape();
        let gs = self.node(ig).value.shape();
        let c = *xs.last().ok_or_else(|| invalid(op, "rank-0 input"))?;
        let gn = self.node(ig).value.numel();
        if gn != 1 && gn != c {
            return Err(mismatch(op, xs, gs));
        }
        Ok(c)
    }

    /// Multiplies the last axis of `x` by `gains` (length 1 or C).
    pub fn mul_channels(&mut self, x: Var, gains: Var) -> Result<Var> {
        let (ix, ig) = (self.idx(x)?, self.idx(gains)?);
        let c = self.check_gains("mul_channels", ix, ig)?;
        let g = self.node(ig).value.data();
        let xv = &self.node(ix).value;
        let mut out = xv.data().to_vec();
        for px in out.chunks_exact_mut(c) {
            for (ch, v) in px.iter_mut().enumerate() {
                *v *= g[if g.len() == 1 { 0 } else { ch }];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.grad_any(&[ix, ig]);
        Ok(self.push(value, Op::MulChannels { x: ix, gains: ig }, rg))
    }

    /// Divides the last axis of `x` by `gains` with highlight preservation.
    ///
    /// With `c = 1/g` and pixel mask `m = (max(mean(x) − 0.9, 0) / 0.1)²`,
    /// each channel is scaled by `max(m + (1 − m)·c, c)`.
    pub fn safe_inverse_gain(&mut self, x: Var, gains: Var) -> Result<Var> {
        let (ix, ig) = (self.idx(x)?, self.idx(gains)?);
        let c = self.check_gains("safe_inverse_gain", ix, ig)?;
        let g = self.node(ig).value.data();
        if g.iter().any(|&v| v <= T::zero()) {
            return Err(invalid("safe_inverse_gain", "gains must be positive"));
        }
        let xv = &self.node(ix).value;
        let mut out = xv.data().to_vec();
        for px in out.chunks_exact_mut(c) {
            let (m, _) = highlight_mask(px);
            for (ch, v) in px.iter_mut().enumerate() {
                let inv = g[if g.len() == 1 { 0 } else { ch }].recip();
                *v *= (m + (T::one() - m) * inv).max(inv);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.grad_any(&[ix, ig]);
        Ok(self.push(value, Op::SafeInverseGain { x: ix, gains: ig }, rg))
    }

    // ---- linear algebra ------------------------------------------------

    /// `(n × k) · (k × m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.node(ia).value, &self.node(ib).value);
        let (n, k, m) = match (av.shape(), bv.shape()) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            (l, r) => return Err(mismatch("matmul", l, r)),
        };
        let mut out = vec![T::zero(); n * m];
        gemm(
            Mat::new(av.data(), n, k),
            Mat::new(bv.data(), k, m),
            &mut out,
            T::zero(),
        );
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.grad_any(&[ia, ib]);
        Ok(self.push(value, Op::MatMul { a: ia, b: ib }, rg))
    }

    /// Multiplies every pixel (row of an `N × 3` matrix) by a `3 × 3` matrix.
    pub fn matmul3(&mut self, x: Var, m: Var) -> Result<Var> {
        if self.shape(m) != [3, 3] {
            return Err(mismatch("matmul3", self.shape(x), self.shape(m)));
        }
        if self.shape(x).len() != 2 || self.shape(x)[1] != 3 {
            return Err(mismatch("matmul3", self.shape(x), self.shape(m)));
        }
        self.matmul(x, m)
    }

    /// Cross-correlation of an `H × W × Cin` image with a `k × k × Cin × Cout`
    /// kernel, zero "same" padding, output extent `ceil(H / stride)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(weight)?, self.idx(bias)?);
        let (xv, wv, bv) = (
            &self.node(ix).value,
            &self.node(iw).value,
            &self.node(ib).value,
        );
        let (h, w, cin) = xv.dims3()?;
        let (k, cout) = match wv.shape() {
            [k1, k2, ci, co] if k1 == k2 && *ci == cin => (*k1, *co),
            _ => return Err(mismatch("conv2d", xv.shape(), wv.shape())),
        };
        if k != 1 && k != 3 {
            return Err(invalid("conv2d", "kernel extent must be 1 or 3"));
        }
        if stride != 1 && stride != 2 {
            return Err(invalid("conv2d", "stride must be 1 or 2"));
        }
        if h == 0 || w == 0 {
            return Err(invalid("conv2d", "empty image"));
        }
        if bv.shape() != [cout] {
            return Err(mismatch("conv2d bias", bv.shape(), &[cout]));
        }
        let geom = ConvGeom {
            height: h,
            width: w,
            cin,
            cout,
            ksize: k,
            stride,
        };
        let out = geom.forward(xv.data(), wv.data(), bv.data());
        let value = Tensor::new(vec![geom.out_h(), geom.out_w(), cout], out)?;
        let rg = self.grad_any(&[ix, iw, ib]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: ix,
                weight: iw,
                bias: ib,
                geom,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = &self.node(ia).value;
        if av.shape().len() != 1 || av.numel() == 0 {
            return Err(invalid("softmax", "expected a non-empty vector"));
        }
        if !av.is_finite() {
            return Err(invalid("softmax", "non-finite logits"));
        }
        let value = Tensor::from_vec(softmax(av.data()));
        let rg = self.node(ia).requires_grad;
        Ok(self.push(value, Op::Softmax { a: ia }, rg))
    }

    /// `H × W × C → C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let means = self.node(ia).value.channel_means()?;
        let rg = self.node(ia).requires_grad;
        Ok(self.push(Tensor::from_vec(means), Op::GlobalAvgPool { a: ia }, rg))
    }

    /// `v · W + b` for `v: n`, `W: n × m`, `b: m`.
    pub fn affine(&mut self, v: Var, weight: Var, bias: Var) -> Result<Var> {
        let (iv, iw, ib) = (self.idx(v)?, self.idx(weight)?, self.idx(bias)?);
        let (vv, wv, bv) = (
            &self.node(iv).value,
            &self.node(iw).value,
            &self.node(ib).value,
        );
        let n = vv.numel();
        let m = match wv.shape() {
            [n2, m] if *n2 == n && vv.shape().len() == 1 => *m,
            _ => return Err(mismatch("affine", vv.shape(), wv.shape())),
        };
        if bv.shape() != [m] {
            return Err(mismatch("affine bias", bv.shape(), &[m]));
        }
        let mut out = bv.data().to_vec();
        gemm(
            Mat::new(vv.data(), 1, n),
            Mat::new(wv.data(), n, m),
            &mut out,
            T::one(),
        );
        let rg = self.grad_any(&[iv, iw, ib]);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Affine {
                v: iv,
                weight: iw,
                bias: ib,
            },
            rg,
        ))
    }

    // ---- structural ----------------------------------------------------

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = self.node(ids[0]).value.shape();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &i in &ids {
            let s = self.node(i).value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", first, s));
            }
            total += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &ids {
                let v = &self.node(i).value;
                let c = *v.shape().last().unwrap();
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = self.grad_any(&ids);
        Ok(self.push(value, Op::Concat { parts: ids }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.node(ia).value.clone().reshape(shape.to_vec())?;
        let rg = self.node(ia).requires_grad;
        Ok(self.push(value, Op::Reshape { a: ia }, rg))
    }

    /// Selects index `row` of the leading axis.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = &self.node(ia).value;
        let lead = *av.shape().first().ok_or_else(|| invalid("row", "rank-0"))?;
        if row >= lead {
            return Err(invalid("row", "index out of range"));
        }
        let inner = av.numel() / lead;
        let mut shape = av.shape()[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, av.data()[row * inner..(row + 1) * inner].to_vec())?;
        let rg = self.node(ia).requires_grad;
        Ok(self.push(value, Op::Row { a: ia, row }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f64 = self.node(ia).value.data().iter().map(|&v| v.as_f64()).sum();
        let rg = self.node(ia).requires_grad;
        Ok(self.push(Tensor::scalar(T::of_f64(s)), Op::Sum { a: ia }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.node(ia).value;
        if v.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s: f64 = v.data().iter().map(|&x| x.as_f64()).sum();
        let value = Tensor::scalar(T::of_f64(s / v.numel() as f64));
        let rg = self.node(ia).requires_grad;
        Ok(self.push(value, Op::Mean { a: ia }, rg))
    }

    /// Divides each column of a matrix by its sum.
    pub fn column_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = &self.node(ia).value;
        let (r, c) = match av.shape() {
            [r, c] => (*r, *c),
            s => return Err(mismatch("column_normalize", s, &[3, 3])),
        };
        let sums = column_sums(av.data(), r, c);
        if sums.iter().any(|s| s.as_f64().abs() < 1e-12) {
            return Err(invalid("column_normalize", "column sums to zero"));
        }
        let mut out = av.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] /= sums[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.node(ia).requires_grad;
        Ok(self.push(value, Op::ColumnNormalize { a: ia }, rg))
    }

    pub fn inverse3(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = &self.node(ia).value;
        if av.shape() != [3, 3] {
            return Err(mismatch("inverse3", av.shape(), &[3, 3]));
        }
        let inv = invert3(av.data())?;
        let rg = self.node(ia).requires_grad;
        Ok(self.push(
            Tensor::new(vec![3, 3], inv.to_vec())?,
            Op::Inverse3 { a: ia },
            rg,
        ))
    }

    // ---- composites ----------------------------------------------------

    /// Convex combination `Σ_k w_k · candidates[k]` over the leading axis.
    pub fn mix(&mut self, weights: Var, candidates: Var) -> Result<Var> {
        let cs = self.shape(candidates).to_vec();
        let k = self.value(weights).numel();
        if cs.first() != Some(&k) {
            return Err(mismatch("mix", &[k], &cs));
        }
        let inner: usize = cs[1..].iter().product();
        let w = self.reshape(weights, &[1, k])?;
        let c = self.reshape(candidates, &[k, inner])?;
        let out = self.matmul(w, c)?;
        let mut shape = cs[1..].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(out, &shape)
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("l1", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    // ---- kinks ---------------------------------------------------------

    /// Side taken by every element of every kinked op: abs, relu, clamp, max
    /// and the `max` guard of [`Tape::safe_inverse_gain`].
    ///
    /// Two evaluations of one graph whose patterns differ lie on opposite
    /// sides of a kink, where a difference quotient is not a derivative.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary { kind, a } => {
                    let x = self.nodes[*a].value.data();
                    match kind {
                        UnaryKind::Abs | UnaryKind::Relu => {
                            out.extend(x.iter().map(|&v| u8::from(v > T::zero())))
                        }
                        UnaryKind::Clamp(lo, hi) => out.extend(
                            x.iter()
                                .map(|&v| u8::from(v > T::lit(*lo)) + u8::from(v > T::lit(*hi))),
                        ),
                        UnaryKind::Neg | UnaryKind::Recip => {}
                    }
                }
                Op::Binary {
                    kind: BinaryKind::Max,
                    a,
                    b,
                    scalar,
                } => {
                    let x = self.nodes[*a].value.data();
                    let y = b.map(|b| self.nodes[b].value.data());
                    out.extend(x.iter().enumerate().map(|(i, &v)| {
                        let w = match y {
                            Some(y) if y.len() == 1 => y[0],
                            Some(y) => y[i],
                            None => *scalar,
                        };
                        u8::from(v > w)
                    }));
                }
                Op::SafeInverseGain { x, gains } => {
                    let g = self.nodes[*gains].value.data();
                    let xv = &self.nodes[*x].value;
                    let c = xv.shape().last().copied().unwrap_or(1);
                    for px in xv.data().chunks_exact(c) {
                        let (m, _) = highlight_mask(px);
                        out.extend((0..c).map(|ch| {
                            let inv = g[if g.len() == 1 { 0 } else { ch }].recip();
                            u8::from(m + (T::one() - m) * inv > inv)
                        }));
                    }
                }
                _ => {}
            }
        }
        out
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        if self.node(il).value.numel() != 1 {
            return Err(invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; il + 1];
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = self.node(i);
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = self.node(i);
        let out = node.value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, scalar } => {
                let av = self.node(*a).value.data();
                let bv = b.map(|j| self.node(j).value.data());
                let rhs = |k: usize| match bv {
                    Some(d) if d.len() == 1 => d[0],
                    Some(d) => d[k],
                    None => *scalar,
                };
                if wants(*a) {
                    let da: Vec<T> = (0..av.len())
                        .map(|k| {
                            let (x, y) = (av[k], rhs(k));
                            g[k] * match kind {
                                BinaryKind::Add | BinaryKind::Sub => T::one(),
                                BinaryKind::Mul => y,
                                BinaryKind::Div => y.recip(),
                                BinaryKind::Pow => {
                                    if y == T::zero() {
                                        T::zero()
                                    } else if x == T::zero() {
                                        if y == T::one() {
                                            T::one()
                                        } else {
                                            T::zero()
                                        }
                                    } else {
                                        y * x.powf(y - T::one())
                                    }
                                }
                                BinaryKind::Max => indicator(x > y),
                            }
                        })
                        .collect();
                    accumulate(grads, *a, &da);
                }
                if let Some(jb) = *b {
                    if wants(jb) {
                        let mut db = vec![T::zero(); self.node(jb).value.numel()];
                        let broadcast = db.len() == 1 && av.len() != 1;
                        for k in 0..av.len() {
                            let (x, y) = (av[k], rhs(k));
                            let d = g[k]
                                * match kind {
                                    BinaryKind::Add => T::one(),
                                    BinaryKind::Sub => -T::one(),
                                    BinaryKind::Mul => x,
                                    BinaryKind::Div => -x / (y * y),
                                    BinaryKind::Pow => {
                                        if x > T::zero() {
                                            out[k] * x.ln()
                                        } else {
                                            T::zero()
                                        }
                                    }
                                    BinaryKind::Max => indicator(y > x),
                                };
                            db[if broadcast { 0 } else { k }] += d;
                        }
                        accumulate(grads, jb, &db);
                    }
                }
            }
            Op::Unary { kind, a } => {
                let av = self.node(*a).value.data();
                let da: Vec<T> = av
                    .iter()
                    .zip(g)
                    .zip(out)
                    .map(|((&x, &gk), &y)| {
                        gk * match kind {
                            UnaryKind::Abs => {
                                indicator::<T>(x > T::zero()) - indicator::<T>(x < T::zero())
                            }
                            UnaryKind::Relu => indicator(x > T::zero()),
                            UnaryKind::Neg => -T::one(),
                            UnaryKind::Recip => -y * y,
                            UnaryKind::Clamp(lo, hi) => {
                                indicator(x > T::lit(*lo) && x < T::lit(*hi))
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::MulChannels { x, gains } => {
                let xv = self.node(*x).value.data();
                let gv = self.node(*gains).value.data();
                let c = *self.node(*x).value.shape().last().unwrap();
                let gi = |ch: usize| if gv.len() == 1 { 0 } else { ch };
                if wants(*x) {
                    let dx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| gk * gv[gi(k % c)])
                        .collect();
                    accumulate(grads, *x, &dx);
                }
                if wants(*gains) {
                    let mut dg = vec![T::zero(); gv.len()];
                    for (k, (&gk, &xk)) in g.iter().zip(xv).enumerate() {
                        dg[gi(k % c)] += gk * xk;
                    }
                    accumulate(grads, *gains, &dg);
                }
            }
            Op::SafeInverseGain { x, gains } => {
                let xv = self.node(*x).value.data();
                let gv = self.node(*gains).value.data();
                let c = *self.node(*x).value.shape().last().unwrap();
                let gi = |ch: usize| if gv.len() == 1 { 0 } else { ch };
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for (p, px) in xv.chunks_exact(c).enumerate() {
                    let (m, dm_dmean) = highlight_mask(px);
                    let gp = &g[p * c..(p + 1) * c];
                    // d out / d m accumulated over channels, routed to x via the mask.
                    let mut dmask = T::zero();
                    for ch in 0..c {
                        let inv = gv[gi(ch)].recip();
                        let masked = m + (T::one() - m) * inv;
                        let (mult, dmult_dm, dmult_dinv) = if masked > inv {
                            (masked, T::one() - inv, T::one() - m)
                        } else {
                            (inv, T::zero(), T::one())
                        };
                        dx[p * c + ch] += gp[ch] * mult;
                        dmask += gp[ch] * px[ch] * dmult_dm;
                        dg[gi(ch)] += gp[ch] * px[ch] * dmult_dinv * (-inv * inv);
                    }
                    if dm_dmean != T::zero() {
                        let share = dmask * dm_dmean / T::count(c);
                        for ch in 0..c {
                            dx[p * c + ch] += share;
                        }
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, &dx);
                }
                if wants(*gains) {
                    accumulate(grads, *gains, &dg);
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                let (n, k) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[1];
                let gm = Mat::new(g, n, m);
                if wants(*a) {
                    let mut da = vec![T::zero(); n * k];
                    gemm(gm, Mat::new(bv.data(), k, m).t(), &mut da, T::zero());
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    gemm(Mat::new(av.data(), n, k).t(), gm, &mut db, T::zero());
                    accumulate(grads, *b, &db);
                }
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let xv = self.node(*x).value.data();
                let wv = self.node(*weight).value.data();
                if wants(*x) {
                    let dx = geom.backward_input(g, wv);
                    accumulate(grads, *x, &dx);
                }
                if wants(*weight) {
                    let mut dw = vec![T::zero(); wv.len()];
                    geom.backward_weight(g, xv, &mut dw);
                    accumulate(grads, *weight, &dw);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); geom.cout];
                    geom.backward_bias(g, &mut db);
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Softmax { a } => {
                let dot: T = g.iter().zip(out).map(|(&a, &b)| a * b).sum();
                let da: Vec<T> = out.iter().zip(g).map(|(&y, &gk)| y * (gk - dot)).collect();
                accumulate(grads, *a, &da);
            }
            Op::GlobalAvgPool { a } => {
                let av = &self.node(*a).value;
                let c = g.len();
                let hw = T::count((av.numel() / c.max(1)).max(1));
                let da: Vec<T> = (0..av.numel()).map(|k| g[k % c] / hw).collect();
                accumulate(grads, *a, &da);
            }
            Op::Affine { v, weight, bias } => {
                let vv = self.node(*v).value.data();
                let wv = self.node(*weight).value.data();
                let (n, m) = (vv.len(), g.len());
                if wants(*v) {
                    let mut dv = vec![T::zero(); n];
                    gemm(
                        Mat::new(g, 1, m),
                        Mat::new(wv, n, m).t(),
                        &mut dv,
                        T::zero(),
                    );
                    accumulate(grads, *v, &dv);
                }
                if wants(*weight) {
                    let mut dw = vec![T::zero(); n * m];
                    gemm(Mat::new(vv, n, 1), Mat::new(g, 1, m), &mut dw, T::zero());
                    accumulate(grads, *weight, &dw);
                }
                if wants(*bias) {
                    accumulate(grads, *bias, g);
                }
            }
            Op::Concat { parts } => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let c = *self.node(p).value.shape().last().unwrap();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::Reshape { a } => accumulate(grads, *a, g),
            Op::Row { a, row } => {
                let n = self.node(*a).value.numel();
                let mut da = vec![T::zero(); n];
                let inner = g.len();
                da[row * inner..(row + 1) * inner].copy_from_slice(g);
                accumulate(grads, *a, &da);
            }
            Op::Sum { a } => {
                let n = self.node(*a).value.numel();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.node(*a).value.numel();
                accumulate(grads, *a, &vec![g[0] / T::count(n); n]);
            }
            Op::ColumnNormalize { a } => {
                let av = &self.node(*a).value;
                let (r, c) = (av.shape()[0], av.shape()[1]);
                let sums = column_sums(av.data(), r, c);
                let mut da = vec![T::zero(); r * c];
                for j in 0..c {
                    let proj: T = (0..r).map(|l| g[l * c + j] * out[l * c + j]).sum();
                    for i in 0..r {
                        da[i * c + j] = (g[i * c + j] - proj) / sums[j];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Inverse3 { a } => {
                // d(M⁻¹) = −M⁻¹ dM M⁻¹  ⇒  dL/dM = −M⁻ᵀ G M⁻ᵀ
                let mut tmp = [T::zero(); 9];
                gemm(
                    Mat::new(out, 3, 3).t(),
                    Mat::new(g, 3, 3),
                    &mut tmp,
                    T::zero(),
                );
                let mut da = [T::zero(); 9];
                gemm(
                    Mat::new(&tmp, 3, 3),
                    Mat::new(out, 3, 3).t(),
                    &mut da,
                    T::zero(),
                );
                da.iter_mut().for_each(|v| *v = -*v);
                accumulate(grads, *a, &da);
            }
        }
    }
}

fn indicator<T: Real>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, d: &[T]) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Highlight mask of one pixel and its derivative w.r.t. the channel mean.
fn highlight_mask<T: Real>(px: &[T]) -> (T, T) {
    let mean = px.iter().copied().sum::<T>() / T::count(px.len());
    let knee = T::lit(HIGHLIGHT_INFLECTION);
    let span = T::one() - knee;
    let t = (mean - knee).max(T::zero()) / span;
    let d = if mean > knee {
        (t + t) / span
    } else {
        T::zero()
    };
    (t * t, d)
}

fn column_sums<T: Real>(m: &[T], r: usize, c: usize) -> Vec<T> {
    (0..c).map(|j| (0..r).map(|i| m[i * c + j]).sum()).collect()
}

pub(crate) fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn det3<T: Real>(m: &[T]) -> T {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Inverse of a row-major 3×3 matrix via the adjugate.
pub(crate) fn invert3<T: Real>(m: &[T]) -> Result<[T; 9]> {
    let det = det3(m);
    if !(det.abs() > T::lit(SINGULAR_EPS)) {
        return Err(Error::SingularMatrix(det.as_f32()));
    }
    let inv_det = det.recip();
    Ok([
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ])
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T = f32> {
    tape: u32,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; zeros when `v` was not reached.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape {
            return Err(Error::NotOnTape);
        }
        let shape = tape.value(v).shape().to_vec();
        match self.grads.get(v.index()).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }

    /// Like [`Gradients::get`] but borrows; `None` when `v` was not reached.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests;
