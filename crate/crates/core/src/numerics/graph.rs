//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. `backward` replays the tape in
//! reverse from a scalar loss.

use std::collections::HashMap;

use super::tensor::permute_data;
use super::{NumericsError, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which axis a per-channel vector broadcasts along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Vector indexes the leading dimension (`[C, H, W]` feature maps).
    First,
    /// Vector indexes the trailing dimension (`[N, d]` token matrices).
    Last,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Bias { x: Var, b: Var, axis: Axis },
    MulVec { x: Var, g: Var, axis: Axis },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Option<Vec<T>> },
    Softmax(Var),
    NormRows { x: Var, groups: usize, rstd: Vec<T> },
    Silu(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat0(Vec<Var>),
    Slice0 { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Mean0(Var),
    MaskedSqErr { x: Var, residual: Vec<T>, row_mask: Option<Vec<T>> },
    Upsample2x(Var),
    AddRows { dst: Var, src: Var, pairs: Vec<(usize, usize)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("input", value, Op::Leaf, &[])
    }

    /// Constant copy of an existing node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(x).map(|p| p * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    /// Multiply by a single-element tensor node (a learnable gate, say).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let v = self.value(x).map(|p| p * c);
        self.push("mul_scalar", v, Op::MulScalar(x, s), &[x, s])
    }

    fn vec_layout(&self, op: &'static str, x: Var, b: Var, axis: Axis) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        let c = match axis {
            Axis::First => xs[0],
            Axis::Last => *xs.last().unwrap(),
        };
        if bs != [c] {
            return Err(shape_err(op, format!("vector {bs:?} does not match {xs:?} along {axis:?}")));
        }
        let n = self.value(x).numel();
        Ok(match axis {
            // (outer, channels, inner)
            Axis::First => (1, c, n / c),
            Axis::Last => (n / c, c, 1),
        })
    }

    /// Broadcast-add a per-channel vector.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: Axis) -> Result<Var> {
        let (outer, c, inner) = self.vec_layout("add_bias", x, b, axis)?;
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        let d = v.data_mut();
        for o in 0..outer {
            for (ch, &bv) in bd.iter().enumerate().take(c) {
                let base = (o * c + ch) * inner;
                d[base..base + inner].iter_mut().for_each(|p| *p += bv);
            }
        }
        self.push("add_bias", v, Op::Bias { x, b, axis }, &[x, b])
    }

    /// Broadcast-multiply by a per-channel vector.
    pub fn mul_vec(&mut self, x: Var, g: Var, axis: Axis) -> Result<Var> {
        let (outer, c, inner) = self.vec_layout("mul_vec", x, g, axis)?;
        let mut v = self.value(x).clone();
        let gd = self.value(g).data().to_vec();
        let d = v.data_mut();
        for o in 0..outer {
            for (ch, &gv) in gd.iter().enumerate().take(c) {
                let base = (o * c + ch) * inner;
                d[base..base + inner].iter_mut().for_each(|p| *p = *p * gv);
            }
        }
        self.push("mul_vec", v, Op::MulVec { x, g, axis }, &[x, g])
    }

    /// 2-D matrix product with optional transposes of either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("expects 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims differ: {sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" })));
        }
        let mut out = vec![T::zero(); m * n];
        let ast = if ta { (1, m as isize) } else { (k as isize, 1) };
        let bst = if tb { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, T::one(), self.value(a).data(), ast, self.value(b).data(), bst, T::zero(), &mut out, (n as isize, 1));
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Batched product `[B, M, K] x [B, K, N]` (or `[B, N, K]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("expects matching 3-D operands, got {sa:?} and {sb:?}")));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("bmm", format!("inner dims differ: {sa:?} x {sb:?} (tb={tb})")));
        }
        let mut out = vec![T::zero(); bsz * m * n];
        let bst = if tb { (1, k as isize) } else { (n as isize, 1) };
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bsz {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bd[i * k * n..(i + 1) * k * n],
                    bst,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let v = Tensor::new(vec![bsz, m, n], out)?;
        self.push("bmm", v, Op::Bmm { a, b, tb }, &[a, b])
    }

    /// Single-image 2-D convolution: `x [Cin, H, W]`, `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[0] || stride == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}, stride {stride}")));
        }
        let (cin, h, wd, k, cout) = (xs[0], xs[1], xs[2], ws[2], ws[0]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { cin, h, w: wd, k, stride, pad, hout, wout };
        let p = hout * wout;
        let ckk = cin * k * k;
        let cols = if k == 1 && stride == 1 && pad == 0 { None } else { Some(im2col(self.value(x).data(), &geom)) };
        let mut out = vec![T::zero(); cout * p];
        {
            let colsref = cols.as_deref().unwrap_or(self.value(x).data());
            T::gemm(cout, ckk, p, T::one(), self.value(w).data(), (ckk as isize, 1), colsref, (p as isize, 1), T::zero(), &mut out, (p as isize, 1));
        }
        let v = Tensor::new(vec![cout, hout, wout], out)?;
        self.push("conv2d", v, Op::Conv2d { x, w, geom, cols }, &[x, w])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let l = *xs.shape().last().unwrap();
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(l) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for p in row.iter_mut() {
                *p = (*p - mx).exp();
                s += *p;
            }
            row.iter_mut().for_each(|p| *p = *p / s);
        }
        let v = Tensor::new(xs.shape().to_vec(), out)?;
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Zero-mean, unit-variance normalisation of each of `groups` equal
    /// contiguous chunks. `groups = N` on `[N, d]` is layer norm; on
    /// `[C, H, W]` it is group norm without the affine part.
    pub fn normalize_rows(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if groups == 0 || !n.is_multiple_of(groups) {
            return Err(shape_err("normalize_rows", format!("{groups} groups do not divide {:?}", self.shape(x))));
        }
        let l = n / groups;
        let eps = T::of(eps);
        let lt = T::of(l as f64);
        let mut out = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(groups);
        for row in out.chunks_mut(l) {
            let mean = row.iter().copied().sum::<T>() / lt;
            let var = row.iter().map(|&p| (p - mean) * (p - mean)).sum::<T>() / lt;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|p| *p = (*p - mean) * r);
            rstd.push(r);
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("normalize_rows", v, Op::NormRows { x, groups, rstd }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|p| p * sigmoid(p));
        self.push("silu", v, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|p| p.exp());
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|p| gelu_parts(p).0);
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|p| p.max(T::zero()));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} invalid for {xs:?}")));
        }
        let (shape, data) = permute_data(self.value(x).data(), &xs, axes);
        let v = Tensor::new(shape, data)?;
        self.push("permute", v, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Transpose of a 2-D node.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat0(&tensors)?;
        self.push("concat0", v, Op::Concat0(parts.to_vec()), parts)
    }

    pub fn slice0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice0(start, end)?;
        self.push("slice0", v, Op::Slice0 { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push("mean", v, Op::Mean(x), &[x])
    }

    /// Mean over the leading axis.
    pub fn mean0(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("mean0", format!("needs at least 2 dims, got {xs:?}")));
        }
        let inner: usize = xs[1..].iter().product();
        let b = T::of(xs[0] as f64);
        let mut out = vec![T::zero(); inner];
        for chunk in self.value(x).data().chunks(inner) {
            out.iter_mut().zip(chunk).for_each(|(o, &p)| *o += p);
        }
        out.iter_mut().for_each(|o| *o = *o / b);
        let v = Tensor::new(xs[1..].to_vec(), out)?;
        self.push("mean0", v, Op::Mean0(x), &[x])
    }

    /// `sum_i m_i * sum_j (x_ij - t_ij)^2` over rows of the leading axis.
    /// Without a mask every row has weight one.
    pub fn masked_sq_err(&mut self, x: Var, target: &Tensor<T>, row_mask: Option<&[T]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs != target.shape() {
            return Err(shape_err("masked_sq_err", format!("prediction {xs:?} vs target {:?}", target.shape())));
        }
        if let Some(m) = row_mask {
            if m.len() != xs[0] {
                return Err(shape_err("masked_sq_err", format!("mask length {} vs {} rows", m.len(), xs[0])));
            }
        }
        let inner = target.numel() / xs[0];
        let residual: Vec<T> = self.value(x).data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let mut total = T::zero();
        for (i, row) in residual.chunks(inner).enumerate() {
            let w = row_mask.map_or(T::one(), |m| m[i]);
            if w != T::zero() {
                total += w * row.iter().map(|&r| r * r).sum::<T>();
            }
        }
        let v = Tensor::scalar(total);
        let op = Op::MaskedSqErr { x, residual, row_mask: row_mask.map(|m| m.to_vec()) };
        self.push("masked_sq_err", v, op, &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("upsample2x", format!("expects [C, H, W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push("upsample2x", v, Op::Upsample2x(x), &[x])
    }

    /// `out = dst`, then `out[d] += src[s]` for each `(s, d)` row pair.
    pub fn add_rows(&mut self, dst: Var, src: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (ds, ss) = (self.shape(dst).to_vec(), self.shape(src).to_vec());
        if ds.len() != 2 || ss.len() != 2 || ds[1] != ss[1] {
            return Err(shape_err("add_rows", format!("dst {ds:?} vs src {ss:?}")));
        }
        if let Some(&(s, d)) = pairs.iter().find(|&&(s, d)| s >= ss[0] || d >= ds[0]) {
            return Err(shape_err("add_rows", format!("row pair ({s}, {d}) out of range for {ss:?} -> {ds:?}")));
        }
        let dim = ds[1];
        let mut out = self.value(dst).clone();
        let sd = self.value(src).data().to_vec();
        for &(s, d) in pairs {
            let row = &mut out.data_mut()[d * dim..(d + 1) * dim];
            row.iter_mut().zip(&sd[s * dim..(s + 1) * dim]).for_each(|(o, &v)| *o += v);
        }
        self.push("add_rows", out, Op::AddRows { dst, src, pairs: pairs.to_vec() }, &[dst, src])
    }

    /// Gradient of `v` from the last `backward` call, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    /// Gradients for every parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self.params.iter().map(|(&id, &v)| (id, self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v))))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Add this graph's parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in self.param_grads() {
            let p = store.get_mut(id);
            p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
        }
    }

    /// Reverse sweep from a single-element loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.acc(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|&p| p * *c).collect()),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).data()[0];
                if self.rg(*x) {
                    self.acc(grads, *x, g.iter().map(|&p| p * c).collect());
                }
                if self.rg(*s) {
                    let ds = g.iter().zip(self.value(*x).data()).map(|(&p, &q)| p * q).sum::<T>();
                    self.acc(grads, *s, vec![ds]);
                }
            }
            Op::Bias { x, b, axis } => {
                self.acc(grads, *x, g.to_vec());
                if self.rg(*b) {
                    let (outer, c, inner) = self.vec_layout("add_bias", *x, *b, *axis).expect("validated");
                    let mut db = vec![T::zero(); c];
                    for o in 0..outer {
                        for (ch, d) in db.iter_mut().enumerate() {
                            let base = (o * c + ch) * inner;
                            *d += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::MulVec { x, g: gam, axis } => {
                let (outer, c, inner) = self.vec_layout("mul_vec", *x, *gam, *axis).expect("validated");
                let gv = self.value(*gam).data();
                let xv = self.value(*x).data();
                if self.rg(*x) {
                    let mut dx = g.to_vec();
                    for o in 0..outer {
                        for (ch, &gc) in gv.iter().enumerate() {
                            let base = (o * c + ch) * inner;
                            dx[base..base + inner].iter_mut().for_each(|p| *p = *p * gc);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*gam) {
                    let mut dg = vec![T::zero(); c];
                    for o in 0..outer {
                        for (ch, d) in dg.iter_mut().enumerate() {
                            let base = (o * c + ch) * inner;
                            *d += g[base..base + inner].iter().zip(&xv[base..base + inner]).map(|(&p, &q)| p * q).sum::<T>();
                        }
                    }
                    self.acc(grads, *gam, dg);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let ast = if *ta { (1, m as isize) } else { (k as isize, 1) };
                let bst = if *tb { (1, k as isize) } else { (n as isize, 1) };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // d op(a) = g op(b)^T, written back through op(a)'s layout
                self.acc_with(grads, *a, |da| {
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (bst.1, bst.0), T::one(), da, ast);
                });
                // d op(b) = op(a)^T g
                self.acc_with(grads, *b, |db| {
                    T::gemm(k, m, n, T::one(), av, (ast.1, ast.0), g, (n as isize, 1), T::one(), db, bst);
                });
            }
            Op::Bmm { a, b, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *tb { sb[1] } else { sb[2] };
                let bst = if *tb { (1, k as isize) } else { (n as isize, 1) };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (mk, kn, mn) = (m * k, k * n, m * n);
                self.acc_with(grads, *a, |da| {
                    for i in 0..bsz {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * mn..(i + 1) * mn],
                            (n as isize, 1),
                            &bv[i * kn..(i + 1) * kn],
                            (bst.1, bst.0),
                            T::one(),
                            &mut da[i * mk..(i + 1) * mk],
                            (k as isize, 1),
                        );
                    }
                });
                self.acc_with(grads, *b, |db| {
                    for i in 0..bsz {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * mk..(i + 1) * mk],
                            (1, k as isize),
                            &g[i * mn..(i + 1) * mn],
                            (n as isize, 1),
                            T::one(),
                            &mut db[i * kn..(i + 1) * kn],
                            bst,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, geom, cols } => {
                let cout = self.shape(*w)[0];
                let p = geom.hout * geom.wout;
                let ckk = geom.cin * geom.k * geom.k;
                let colsref = cols.as_deref().unwrap_or(self.value(*x).data());
                self.acc_with(grads, *w, |dw| {
                    T::gemm(cout, p, ckk, T::one(), g, (p as isize, 1), colsref, (1, p as isize), T::one(), dw, (ckk as isize, 1));
                });
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); ckk * p];
                    T::gemm(ckk, cout, p, T::one(), self.value(*w).data(), (1, ckk as isize), g, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                    let dx = if cols.is_none() { dcols } else { col2im(&dcols, geom) };
                    self.acc(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let l = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(l).zip(g.chunks(l)).zip(out.chunks(l)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gg - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::NormRows { x, groups, rstd } => {
                let l = g.len() / groups;
                let lt = T::of(l as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (r, ((drow, grow), yrow)) in dx.chunks_mut(l).zip(g.chunks(l)).zip(out.chunks(l)).enumerate() {
                    let mg = grow.iter().copied().sum::<T>() / lt;
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / lt;
                    for ((d, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = rstd[r] * (gg - mg - y * mgy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gg, &p)| {
                            let s = sigmoid(p);
                            gg * s * (T::one() + p * (T::one() - s))
                        })
                        .collect(),
                );
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, g.iter().zip(y).map(|(&gg, &e)| gg * e).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(xv).map(|(&gg, &p)| gg * gelu_parts(p).1).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(xv).map(|(&gg, &p)| if p > T::zero() { gg } else { T::zero() }).collect());
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, dx) = permute_data(g, node.value.shape(), &inv);
                self.acc(grads, *x, dx);
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.acc(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice0 { x, start } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let off = start * inner;
                self.acc_with(grads, *x, |dx| {
                    dx[off..off + g.len()].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Mean0(x) => {
                let b = self.shape(*x)[0];
                let bt = T::of(b as f64);
                let mut dx = Vec::with_capacity(g.len() * b);
                for _ in 0..b {
                    dx.extend(g.iter().map(|&p| p / bt));
                }
                self.acc(grads, *x, dx);
            }
            Op::MaskedSqErr { x, residual, row_mask } => {
                let rows = self.shape(*x)[0];
                let inner = residual.len() / rows;
                let two = T::of(2.0) * g[0];
                let mut dx = vec![T::zero(); residual.len()];
                for (r, (drow, rrow)) in dx.chunks_mut(inner).zip(residual.chunks(inner)).enumerate() {
                    let w = row_mask.as_ref().map_or(T::one(), |m| m[r]);
                    if w != T::zero() {
                        drow.iter_mut().zip(rrow).for_each(|(d, &res)| *d = two * w * res);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::AddRows { dst, src, pairs } => {
                self.acc(grads, *dst, g.to_vec());
                let dim = self.shape(*dst)[1];
                self.acc_with(grads, *src, |ds| {
                    for &(s, d) in pairs {
                        ds[s * dim..(s + 1) * dim].iter_mut().zip(&g[d * dim..(d + 1) * dim]).for_each(|(a, &b)| *a += b);
                    }
                });
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.hout * g.wout;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = (c * g.h + iy as usize) * g.w;
                    let dst = row + oy * g.wout;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.hout * g.wout;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (c * g.h + iy as usize) * g.w;
                    let src = row + oy * g.wout;
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
