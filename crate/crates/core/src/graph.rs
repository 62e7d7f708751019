//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; every op reads earlier nodes
//! only, so insertion order is a topological order and backward is a single
//! reverse sweep. Handles ([`Var`]) are tagged with their graph so mixing
//! graphs is caught at the call site.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::nn::{Activation, ConvGeom, NormKind};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, dims4, numel, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);
pub(crate) static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    /// Position of the node in its graph.
    pub fn node_id(&self) -> usize {
        self.index
    }
}

/// Identifies a parameter tensor inside a particular [`ParamStore`](crate::nn::ParamStore).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is `(n, 1, h, w)` and spreads over the channels of `a`.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary { kind: Binary, a: usize, b: usize, bcast: Broadcast },
    Affine { x: usize, scale: T },
    MulScalar { x: usize, s: usize },
    DivScalar { x: usize, s: usize },
    DotConst { x: usize, m: Vec<T> },
    Sum { x: usize },
    Mean { x: usize },
    Conv { x: usize, w: usize, b: Option<usize>, shape: ConvShape },
    ConvTranspose { x: usize, w: usize, b: Option<usize>, shape: ConvShape },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, features: usize },
    Reshape { x: usize },
    Concat { a: usize, b: usize, ca: usize, cb: usize, plane: usize },
    Norm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, channels: usize, plane: usize, kind: NormKind },
    ChannelAffine { x: usize, gamma: usize, beta: usize, mean: Vec<T>, inv_std: Vec<T>, plane: usize },
    Act { x: usize, kind: Activation },
    Softplus { x: usize },
    Abs { x: usize },
    AttenFuse { a: usize, b: usize, alpha: usize, channels: usize, plane: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Per-channel statistics observed by a batch-normalization forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() });
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(Error::ForeignVar)
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, param: None });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn grad_of(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf carrying a copy of `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Differentiable leaf regardless of the tensor flag.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; gradients flow back to `key` via
    /// [`ParamStore::accumulate`](crate::nn::ParamStore::accumulate).
    pub fn param(&mut self, t: &Tensor<T>, key: ParamKey, trainable: bool) -> Var {
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, trainable);
        self.nodes[v.index].param = Some(key);
        v
    }

    /// Constant copy of `v`'s current value (stops gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = self.node(v)?;
        let (shape, value) = (n.shape.clone(), n.value.clone());
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.node(v)?.value)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        let n = self.node(v)?;
        Tensor::new(&n.shape, n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let n = self.node(v)?;
        if n.value.len() != 1 {
            return Err(Error::NonScalarRoot(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    /// `(var, key)` for every parameter leaf.
    pub fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamKey)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| n.param.map(|k| (Var { graph: self.id, index: i }, k)))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        let bcast = if sa == sb {
            Broadcast::Same
        } else if sa.len() == 4 && sb.len() == 4 && sb[1] == 1 && sa[0] == sb[0] && sa[2..] == sb[2..] {
            Broadcast::Channel
        } else {
            return Err(Error::ShapeMismatch { op: "elementwise", left: sa.clone(), right: sb.clone() });
        };
        let shape = sa.clone();
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value: Vec<T> = match bcast {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Channel => {
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                va.iter().enumerate().map(|(e, &x)| f(x, vb[(e / (c * plane)) * plane + e % plane])).collect()
            }
        };
        let rg = self.grad_of(&[ia, ib]);
        Ok(self.push(shape, value, Op::Binary { kind, a: ia, b: ib, bcast }, rg))
    }

    /// Elementwise sum; `b` may be a one-channel map broadcast over `a`'s channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let value = n.value.iter().map(|&v| v * scale + shift).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Affine { x: ix, scale }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.affine(x, c, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.affine(x, T::one(), c)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -T::one(), T::one())
    }

    fn scalar_idx(&self, s: Var) -> Result<usize> {
        let i = self.idx(s)?;
        if self.nodes[i].value.len() != 1 {
            return Err(Error::ShapeMismatch { op: "scalar operand", left: vec![1], right: self.nodes[i].shape.clone() });
        }
        Ok(i)
    }

    /// `x * s` for a one-element variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.scalar_idx(s)?);
        let sv = self.nodes[is].value[0];
        let value = self.nodes[ix].value.iter().map(|&v| v * sv).collect();
        let rg = self.grad_of(&[ix, is]);
        Ok(self.push(self.nodes[ix].shape.clone(), value, Op::MulScalar { x: ix, s: is }, rg))
    }

    /// `x / s` for a one-element variable `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.scalar_idx(s)?);
        let sv = self.nodes[is].value[0];
        let value = self.nodes[ix].value.iter().map(|&v| v / sv).collect();
        let rg = self.grad_of(&[ix, is]);
        Ok(self.push(self.nodes[ix].shape.clone(), value, Op::DivScalar { x: ix, s: is }, rg))
    }

    /// `sum(x ⊙ m)` for a constant `m` of the same length.
    pub fn dot_const(&mut self, x: Var, m: Vec<T>) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        if m.len() != n.value.len() {
            return Err(Error::ShapeMismatch { op: "dot_const", left: n.shape.clone(), right: vec![m.len()] });
        }
        let value = n.value.iter().zip(&m).map(|(&a, &b)| a * b).sum();
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![value], Op::DotConst { x: ix, m }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let value = n.value.iter().copied().sum();
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![value], Op::Sum { x: ix }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let value = n.value.iter().copied().sum::<T>() / T::of(n.value.len() as f64);
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![value], Op::Mean { x: ix }, rg))
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<Option<usize>> {
        b.map(|b| {
            let ib = self.idx(b)?;
            if self.nodes[ib].value.len() != channels {
                return Err(Error::ShapeMismatch { op: "bias", left: vec![channels], right: self.nodes[ib].shape.clone() });
            }
            Ok(ib)
        })
        .transpose()
    }

    /// Strided, padded, dilated cross-correlation; `w` is `(c_out, c_in, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (n, c, h, wd) = dims4(&self.nodes[ix].shape)?;
        let (co, ci, k, k2) = dims4(&self.nodes[iw].shape)?;
        if ci != c || k != k2 {
            return Err(Error::ShapeMismatch { op: "conv2d", left: self.nodes[ix].shape.clone(), right: self.nodes[iw].shape.clone() });
        }
        geom.validate()?;
        let out = |s| kernels::conv_out_size(s, k, geom.stride, geom.pad, geom.dilation);
        let (Some(ho), Some(wo)) = (out(h), out(wd)) else {
            return Err(Error::InvalidShape { shape: vec![n, c, h, wd], reason: format!("conv k={k} {geom:?} leaves no output") });
        };
        let ib = self.check_bias(b, co)?;
        let shape = ConvShape { n, c_wide: c, h_wide: h, w_wide: wd, c_narrow: co, h_narrow: ho, w_narrow: wo, k, stride: geom.stride, pad: geom.pad, dilation: geom.dilation };
        let value = shape.correlate(&self.nodes[ix].value, &self.nodes[iw].value, ib.map(|i| self.nodes[i].value.as_slice()));
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        let rg = self.grad_of(&inputs);
        Ok(self.push(vec![n, co, ho, wo], value, Op::Conv { x: ix, w: iw, b: ib, shape }, rg))
    }

    /// Adjoint of [`conv2d`](Self::conv2d); `w` is `(c_in, c_out, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (n, c, h, wd) = dims4(&self.nodes[ix].shape)?;
        let (ci, co, k, k2) = dims4(&self.nodes[iw].shape)?;
        if ci != c || k != k2 {
            return Err(Error::ShapeMismatch { op: "conv_transpose2d", left: self.nodes[ix].shape.clone(), right: self.nodes[iw].shape.clone() });
        }
        geom.validate()?;
        let out = |s| kernels::conv_transpose_out_size(s, k, geom.stride, geom.pad, geom.dilation);
        let (Some(ho), Some(wo)) = (out(h), out(wd)) else {
            return Err(Error::InvalidShape { shape: vec![n, c, h, wd], reason: format!("conv_transpose k={k} {geom:?} leaves no output") });
        };
        let ib = self.check_bias(b, co)?;
        let shape = ConvShape { n, c_wide: co, h_wide: ho, w_wide: wo, c_narrow: c, h_narrow: h, w_narrow: wd, k, stride: geom.stride, pad: geom.pad, dilation: geom.dilation };
        let value = shape.correlate_adjoint(&self.nodes[ix].value, &self.nodes[iw].value, ib.map(|i| self.nodes[i].value.as_slice()));
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        let rg = self.grad_of(&inputs);
        Ok(self.push(vec![n, co, ho, wo], value, Op::ConvTranspose { x: ix, w: iw, b: ib, shape }, rg))
    }

    /// Affine map over the flattened trailing dims: `(n, ...) -> (n, out)`, `w` is `(out, features)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let xs = &self.nodes[ix].shape;
        let rows = xs[0];
        let features = numel(xs) / rows;
        let ws = &self.nodes[iw].shape;
        if ws.len() != 2 || ws[1] != features {
            return Err(Error::ShapeMismatch { op: "linear", left: xs.clone(), right: ws.clone() });
        }
        let out = ws[0];
        let ib = self.check_bias(b, out)?;
        let mut value = vec![T::zero(); rows * out];
        T::gemm(rows, features, out, T::one(), &self.nodes[ix].value, false, &self.nodes[iw].value, true, T::zero(), &mut value);
        if let Some(ib) = ib {
            let bv = &self.nodes[ib].value;
            value.chunks_mut(out).for_each(|r| r.iter_mut().zip(bv).for_each(|(v, &b)| *v += b));
        }
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        let rg = self.grad_of(&inputs);
        Ok(self.push(vec![rows, out], value, Op::Linear { x: ix, w: iw, b: ib, rows, features }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        check_shape(shape)?;
        let n = &self.nodes[ix];
        if numel(shape) != n.value.len() {
            return Err(Error::ShapeMismatch { op: "reshape", left: n.shape.clone(), right: shape.to_vec() });
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x: ix }, rg))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (n, ca, h, w) = dims4(&self.nodes[ia].shape)?;
        let (nb, cb, hb, wb) = dims4(&self.nodes[ib].shape)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch { op: "concat_channels", left: self.nodes[ia].shape.clone(), right: self.nodes[ib].shape.clone() });
        }
        let plane = h * w;
        let mut value = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            value.extend_from_slice(&self.nodes[ia].value[s * ca * plane..(s + 1) * ca * plane]);
            value.extend_from_slice(&self.nodes[ib].value[s * cb * plane..(s + 1) * cb * plane]);
        }
        let rg = self.grad_of(&[ia, ib]);
        Ok(self.push(vec![n, ca + cb, h, w], value, Op::Concat { a: ia, b: ib, ca, cb, plane }, rg))
    }

    /// Batch (per channel over `n,h,w`) or instance (per sample and channel over
    /// `h,w`) normalization followed by `gamma * x̂ + beta`.
    ///
    /// Returns batch statistics for the batch kind so callers can update running estimates.
    pub fn normalize(&mut self, x: Var, gamma: Var, beta: Var, kind: NormKind, eps: T) -> Result<(Var, Option<BatchStats<T>>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, h, w) = dims4(&self.nodes[ix].shape)?;
        if self.nodes[ig].value.len() != c || self.nodes[ib].value.len() != c {
            return Err(Error::ShapeMismatch { op: "normalize", left: self.nodes[ix].shape.clone(), right: self.nodes[ig].shape.clone() });
        }
        let plane = h * w;
        let (groups, count) = match kind {
            NormKind::Batch => (c, n * plane),
            NormKind::Instance => (n * c, plane),
        };
        if count < 2 {
            return Err(Error::InvalidShape { shape: self.nodes[ix].shape.clone(), reason: format!("{kind:?} norm needs at least two elements per statistic") });
        }
        let group = |e: usize| match kind {
            NormKind::Batch => (e / plane) % c,
            NormKind::Instance => e / plane,
        };
        let xv = &self.nodes[ix].value;
        let cnt = T::of(count as f64);
        let mut mean = vec![T::zero(); groups];
        for (e, &v) in xv.iter().enumerate() {
            mean[group(e)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        let mut var = vec![T::zero(); groups];
        for (e, &v) in xv.iter().enumerate() {
            let d = v - mean[group(e)];
            var[group(e)] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat: Vec<T> = xv.iter().enumerate().map(|(e, &v)| (v - mean[group(e)]) * inv_std[group(e)]).collect();
        let (gv, bv) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let value = xhat.iter().enumerate().map(|(e, &v)| gv[(e / plane) % c] * v + bv[(e / plane) % c]).collect();
        let stats = matches!(kind, NormKind::Batch).then(|| BatchStats { mean: mean.clone(), var: var.clone(), count });
        let rg = self.grad_of(&[ix, ig, ib]);
        let shape = self.nodes[ix].shape.clone();
        let v = self.push(shape, value, Op::Norm { x: ix, gamma: ig, beta: ib, xhat, inv_std, channels: c, plane, kind }, rg);
        Ok((v, stats))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` with frozen per-channel statistics.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (_, c, h, w) = dims4(&self.nodes[ix].shape)?;
        if [self.nodes[ig].value.len(), self.nodes[ib].value.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
            return Err(Error::ShapeMismatch { op: "channel_affine", left: self.nodes[ix].shape.clone(), right: vec![mean.len()] });
        }
        let plane = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let value = self.nodes[ix]
            .value
            .iter()
            .enumerate()
            .map(|(e, &v)| {
                let ch = (e / plane) % c;
                gv[ch] * (v - mean[ch]) * inv_std[ch] + bv[ch]
            })
            .collect();
        let rg = self.grad_of(&[ix, ig, ib]);
        let shape = self.nodes[ix].shape.clone();
        Ok(self.push(shape, value, Op::ChannelAffine { x: ix, gamma: ig, beta: ib, mean: mean.to_vec(), inv_std, plane }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let value = match kind {
            Activation::Relu => n.value.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Activation::LeakyRelu(slope) => {
                let s = T::of(slope);
                n.value.iter().map(|&v| if v > T::zero() { v } else { s * v }).collect()
            }
            Activation::Sigmoid => n.value.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => n.value.iter().map(|&v| v.tanh()).collect(),
        };
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Act { x: ix, kind }, rg))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let value = n.value.iter().map(|&v| softplus(v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Softplus { x: ix }, rg))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let value = n.value.iter().map(|&v| v.abs()).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Abs { x: ix }, rg))
    }

    /// `a ⊙ alpha + b ⊙ (1 - alpha)` with a one-channel `alpha` shared by all channels.
    pub fn atten_fuse(&mut self, a: Var, b: Var, alpha: Var) -> Result<Var> {
        let (ia, ib, il) = (self.idx(a)?, self.idx(b)?, self.idx(alpha)?);
        same_shape("atten_fuse", &self.nodes[ia].shape, &self.nodes[ib].shape)?;
        let (n, c, h, w) = dims4(&self.nodes[ia].shape)?;
        if self.nodes[il].shape != [n, 1, h, w] {
            return Err(Error::ShapeMismatch { op: "atten_fuse alpha", left: vec![n, 1, h, w], right: self.nodes[il].shape.clone() });
        }
        let plane = h * w;
        let (va, vb, vl) = (&self.nodes[ia].value, &self.nodes[ib].value, &self.nodes[il].value);
        let value = va
            .iter()
            .zip(vb)
            .enumerate()
            .map(|(e, (&x, &y))| {
                let al = vl[(e / (c * plane)) * plane + e % plane];
                // rounding must not leave the [min, max] hull of the two inputs
                (y + al * (x - y)).max(x.min(y)).min(x.max(y))
            })
            .collect();
        let rg = self.grad_of(&[ia, ib, il]);
        Ok(self.push(vec![n, c, h, w], value, Op::AttenFuse { a: ia, b: ib, alpha: il, channels: c, plane }, rg))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let ir = self.idx(root)?;
        if self.nodes[ir].value.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[ir].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[ir].requires_grad {
            grads[ir] = Some(vec![T::one()]);
        }
        for i in (0..=ir).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let (a, b) = (*a, *b);
                let (c, plane) = match bcast {
                    Broadcast::Same => (1, 1),
                    Broadcast::Channel => (node.shape[1], node.shape[2] * node.shape[3]),
                };
                let bi = |e: usize| match bcast {
                    Broadcast::Same => e,
                    Broadcast::Channel => (e / (c * plane)) * plane + e % plane,
                };
                if self.needs(a) {
                    let d = match kind {
                        Binary::Add | Binary::Sub => dy.to_vec(),
                        Binary::Mul => dy.iter().enumerate().map(|(e, &g)| g * val(b)[bi(e)]).collect(),
                    };
                    accumulate(grads, a, d);
                }
                if self.needs(b) {
                    let mut d = vec![T::zero(); self.nodes[b].value.len()];
                    for (e, &g) in dy.iter().enumerate() {
                        d[bi(e)] += match kind {
                            Binary::Add => g,
                            Binary::Sub => -g,
                            Binary::Mul => g * val(a)[e],
                        };
                    }
                    accumulate(grads, b, d);
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    accumulate(grads, *x, dy.iter().map(|&g| g * *scale).collect());
                }
            }
            Op::MulScalar { x, s } => {
                let sv = val(*s)[0];
                if self.needs(*x) {
                    accumulate(grads, *x, dy.iter().map(|&g| g * sv).collect());
                }
                if self.needs(*s) {
                    let d = dy.iter().zip(val(*x)).map(|(&g, &v)| g * v).sum();
                    accumulate(grads, *s, vec![d]);
                }
            }
            Op::DivScalar { x, s } => {
                let sv = val(*s)[0];
                if self.needs(*x) {
                    accumulate(grads, *x, dy.iter().map(|&g| g / sv).collect());
                }
                if self.needs(*s) {
                    let d: T = dy.iter().zip(val(*x)).map(|(&g, &v)| g * v).sum();
                    accumulate(grads, *s, vec![-d / (sv * sv)]);
                }
            }
            Op::DotConst { x, m } => {
                if self.needs(*x) {
                    accumulate(grads, *x, m.iter().map(|&v| v * dy[0]).collect());
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, vec![dy[0]; self.nodes[*x].value.len()]);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let len = self.nodes[*x].value.len();
                    accumulate(grads, *x, vec![dy[0] / T::of(len as f64); len]);
                }
            }
            Op::Conv { x, w, b, shape } => {
                let (dx, dw) = shape.correlate_backward(val(*x), val(*w), dy, self.needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    accumulate(grads, b, kernels::channel_sums(dy, shape.c_narrow, shape.h_narrow * shape.w_narrow));
                }
            }
            Op::ConvTranspose { x, w, b, shape } => {
                let (dx, dw) = shape.correlate_adjoint_backward(val(*x), val(*w), dy, self.needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    accumulate(grads, b, kernels::channel_sums(dy, shape.c_wide, shape.h_wide * shape.w_wide));
                }
            }
            Op::Linear { x, w, b, rows, features } => {
                let out = node.shape[1];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * features];
                    T::gemm(*rows, out, *features, T::one(), dy, false, val(*w), false, T::zero(), &mut dx);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out * features];
                    T::gemm(out, *rows, *features, T::one(), dy, true, val(*x), false, T::zero(), &mut dw);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![T::zero(); out];
                    dy.chunks(out).for_each(|r| db.iter_mut().zip(r).for_each(|(d, &g)| *d += g));
                    accumulate(grads, b, db);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, dy.to_vec());
                }
            }
            Op::Concat { a, b, ca, cb, plane } => {
                let per = (ca + cb) * plane;
                if self.needs(*a) {
                    accumulate(grads, *a, dy.chunks(per).flat_map(|s| s[..ca * plane].iter().copied()).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.chunks(per).flat_map(|s| s[ca * plane..].iter().copied()).collect());
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, channels, plane, kind } => {
                let (c, plane) = (*channels, *plane);
                let ch = |e: usize| (e / plane) % c;
                let group = |e: usize| match kind {
                    NormKind::Batch => ch(e),
                    NormKind::Instance => e / plane,
                };
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    dy.iter().zip(xhat).enumerate().for_each(|(e, (&g, &h))| dg[ch(e)] += g * h);
                    accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![T::zero(); c];
                    dy.iter().enumerate().for_each(|(e, &g)| db[ch(e)] += g);
                    accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let gv = val(*gamma);
                    let groups = inv_std.len();
                    let count = T::of((dy.len() / groups) as f64);
                    let dxhat: Vec<T> = dy.iter().enumerate().map(|(e, &g)| g * gv[ch(e)]).collect();
                    let mut s1 = vec![T::zero(); groups];
                    let mut s2 = vec![T::zero(); groups];
                    for (e, (&d, &h)) in dxhat.iter().zip(xhat).enumerate() {
                        s1[group(e)] += d;
                        s2[group(e)] += d * h;
                    }
                    let dx = dxhat
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(e, (&d, &h))| {
                            let g = group(e);
                            inv_std[g] / count * (count * d - s1[g] - h * s2[g])
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::ChannelAffine { x, gamma, beta, mean, inv_std, plane } => {
                let c = mean.len();
                let ch = |e: usize| (e / plane) % c;
                let xv = val(*x);
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    dy.iter().enumerate().for_each(|(e, &g)| dg[ch(e)] += g * (xv[e] - mean[ch(e)]) * inv_std[ch(e)]);
                    accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![T::zero(); c];
                    dy.iter().enumerate().for_each(|(e, &g)| db[ch(e)] += g);
                    accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let gv = val(*gamma);
                    accumulate(grads, *x, dy.iter().enumerate().map(|(e, &g)| g * gv[ch(e)] * inv_std[ch(e)]).collect());
                }
            }
            Op::Act { x, kind } => {
                if self.needs(*x) {
                    let (xv, yv) = (val(*x), node.value.as_slice());
                    let d = dy
                        .iter()
                        .enumerate()
                        .map(|(e, &g)| {
                            g * match kind {
                                Activation::Relu => if xv[e] > T::zero() { T::one() } else { T::zero() },
                                Activation::LeakyRelu(s) => if xv[e] > T::zero() { T::one() } else { T::of(*s) },
                                Activation::Sigmoid => yv[e] * (T::one() - yv[e]),
                                Activation::Tanh => T::one() - yv[e] * yv[e],
                            }
                        })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Softplus { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, dy.iter().zip(val(*x)).map(|(&g, &v)| g * sigmoid(v)).collect());
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let d = dy
                        .iter()
                        .zip(val(*x))
                        .map(|(&g, &v)| {
                            if v > T::zero() {
                                g
                            } else if v < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::AttenFuse { a, b, alpha, channels, plane } => {
                let (c, plane) = (*channels, *plane);
                let (va, vb, vl) = (val(*a), val(*b), val(*alpha));
                let li = |e: usize| (e / (c * plane)) * plane + e % plane;
                if self.needs(*a) {
                    accumulate(grads, *a, dy.iter().enumerate().map(|(e, &g)| g * vl[li(e)]).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.iter().enumerate().map(|(e, &g)| g * (T::one() - vl[li(e)])).collect());
                }
                if self.needs(*alpha) {
                    let mut d = vec![T::zero(); vl.len()];
                    dy.iter().enumerate().for_each(|(e, &g)| d[li(e)] += g * (va[e] - vb[e]));
                    accumulate(grads, *alpha, d);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, delta: Vec<T>) {
    match &mut grads[i] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `∂root/∂v` for a differentiable leaf; `None` for non-differentiable leaves.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Writes `∂root/∂leaf` into the tensor's gradient buffer (accumulating).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.wrt(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_product_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(&t(&[3], &[4.0, 5.0, 6.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).unwrap(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn identity_cases() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).sin()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let one = g.constant(&x.ones_like());
        let zero = g.constant(&x.zeros_like());
        let m = g.mul(xv, one).unwrap();
        let a = g.add(xv, zero).unwrap();
        assert_eq!(g.value(m).unwrap(), x.values());
        assert_eq!(g.value(a).unwrap(), x.values());
    }

    #[test]
    fn broadcast_only_over_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3, 4, 4]).unwrap());
        let map = g.constant(&Tensor::ones(&[2, 1, 4, 4]).unwrap());
        assert!(g.mul(a, map).is_ok());
        let bad = g.constant(&Tensor::ones(&[1, 1, 4, 4]).unwrap());
        let err = g.mul(a, bad).unwrap_err().to_string();
        assert!(err.contains("[2, 3, 4, 4]") && err.contains("[1, 1, 4, 4]"), "{err}");
        let bad = g.constant(&Tensor::ones(&[2, 3, 4]).unwrap());
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::from_fn(&[2, 3], |i| i as f64).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::new();
        let x = g.variable(&t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_of_half_sum() {
        let mut g = Graph::new();
        let x = g.variable(&t(&[4], &[1.0, -2.0, 0.0, 5.0]));
        let h = g.scale(x, 0.5).unwrap();
        let s = g.sum(h).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[0.5; 4]);
    }

    #[test]
    fn non_scalar_root_and_foreign_var_rejected() {
        let mut g = Graph::new();
        let x = g.variable(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
        let mut other = Graph::<f64>::new();
        let y = other.variable(&t(&[1], &[1.0]));
        assert!(matches!(g.backward(y), Err(Error::ForeignVar)));
        assert!(g.add(x, y).is_err());
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&t(&[2], &[1.0, 2.0]));
        let c = g.constant(&t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        for _ in 0..2 {
            let mut g = Graph::new();
            let v = g.leaf(&x);
            let s = g.sum(v).unwrap();
            g.backward(s).unwrap().accumulate_into(v, &mut x).unwrap();
        }
        assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn relu_kink_uses_negative_side_slope() {
        let mut g = Graph::new();
        let x = g.variable(&t(&[1], &[0.0]));
        let y = g.activation(x, Activation::LeakyRelu(0.1)).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[0.1]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0 && softplus(-1000.0f64) < 1e-300);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
