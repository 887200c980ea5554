//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse. All image
//! tensors use a single-sample `[channels, height, width]` layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::fft::Fft2;
use crate::kernels::{self, ConvGeom, LinearPlan};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::{matmul_into, Real};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    /// Tanh approximation of GELU.
    Gelu,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddB(Var, Var, Vec<usize>),
    MulB(Var, Var, Vec<usize>),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Unary(Var, Unary),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Conv { x: Var, w: Var, geom: ConvGeom, cout: usize, cols: Vec<T> },
    DwConv { x: Var, w: Var, c: usize, h: usize, w_: usize },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { a: Var, offset: usize },
    Gather { a: Var, idx: Vec<usize> },
    LayerNorm { a: Var, gamma: Var, beta: Var, outer: usize, n: usize, inner: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanLast(Var, usize),
    Pad { a: Var, c: usize, h: usize, w: usize, rows: Vec<Option<usize>>, cols: Vec<Option<usize>> },
    Resize { a: Var, c: usize, ph: LinearPlan<T>, pw: LinearPlan<T> },
    Spectral { x: Var, mask: Var, dc: Option<Var>, c: usize, h: usize, w: usize, spec: Vec<(Vec<T>, Vec<T>)> },
    Precomputed(Vec<(Var, Vec<T>)>),
    Renorm { a: Var, mask: Vec<T>, sum: T },
    L2Rows { a: Var, n: usize, norms: Vec<T> },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by variable.
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

fn gelu<T: Real>(x: T) -> T {
    let k = T::c(0.797_884_560_802_865_4);
    let c = T::c(0.044_715);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(0.797_884_560_802_865_4);
    let c = T::c(0.044_715);
    let half = T::c(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph that records what is needed for [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], record: true }
    }

    /// A graph for inference only; parameters are marked as not requiring
    /// gradients and large backward buffers are dropped.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], record: false }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "value/shape mismatch for new node");
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    /// Input whose gradient is tracked, for sensitivity checks.
    pub fn input_grad(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = self.params.get(id);
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Param, self.record);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, self.shape(a).to_vec(), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, self.shape(a).to_vec(), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, self.shape(a).to_vec(), Op::Mul(a, b), ng)
    }

    fn bstrides(&self, a: Var, b: Var) -> Vec<usize> {
        kernels::broadcast_strides(self.shape(a), self.shape(b))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} into {:?}", self.shape(b), self.shape(a)))
    }

    /// `a + b` with `b` broadcast (right-aligned) to the shape of `a`.
    pub fn add_b(&mut self, a: Var, b: Var) -> Var {
        let bs = self.bstrides(a, b);
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        kernels::for_each_run(self.shape(a), &bs, |o, s, n, st| {
            for i in 0..n {
                out[o + i] += bv[s + i * st];
            }
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(out, self.shape(a).to_vec(), Op::AddB(a, b, bs), ng)
    }

    /// `a * b` with `b` broadcast (right-aligned) to the shape of `a`.
    pub fn mul_b(&mut self, a: Var, b: Var) -> Var {
        let bs = self.bstrides(a, b);
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        kernels::for_each_run(self.shape(a), &bs, |o, s, n, st| {
            for i in 0..n {
                out[o + i] *= bv[s + i * st];
            }
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(out, self.shape(a).to_vec(), Op::MulB(a, b, bs), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).iter().map(|&x| x + s).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::AddScalar(a), ng)
    }

    /// Multiplies `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by expects a one-element factor");
        let f = self.value(s)[0];
        let v = self.value(a).iter().map(|&x| x * f).collect();
        let ng = self.ng(a) || self.ng(s);
        self.push(v, self.shape(a).to_vec(), Op::ScaleBy(a, s), ng)
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(T) -> T = match u {
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Relu => |x: T| x.max(T::zero()),
            Unary::Exp => |x: T| x.exp(),
            Unary::Log => |x: T| x.ln(),
            Unary::Abs => |x: T| x.abs(),
            Unary::Sqrt => |x: T| x.sqrt(),
            Unary::Square => |x: T| x * x,
        };
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::Unary(a, u), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Row-major matrix product; `a` is viewed as `m x k` (`k x m` if `ta`)
    /// and `b` as `k x n` (`n x k` if `tb`). The result has shape `[m, n]`.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool, m: usize, k: usize, n: usize) -> Var {
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), ta, self.value(b), tb, &mut out, m, k, n, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![m, n], Op::MatMul { a, b, ta, tb, m, k, n }, ng)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.matmul_ex(a, false, b, false, m, k, n)
    }

    /// Affine map over rows: `x [r, din] -> x W^T + b` with `W [dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let din = *sx.last().unwrap();
        assert_eq!(sw[1], din, "linear weight {:?} for input {:?}", sw, sx);
        let rows = numel(&sx) / din;
        let y = self.matmul_ex(x, false, w, true, rows, din, sw[0]);
        let y = match b {
            Some(b) => self.add_b(y, b),
            None => y,
        };
        let mut shape = sx;
        *shape.last_mut().unwrap() = sw[0];
        self.reshape(y, &shape)
    }

    /// Batched product over the leading `batch` matrices of `a` and `b`.
    #[allow(clippy::too_many_arguments)]
    pub fn bmm(&mut self, a: Var, ta: bool, b: Var, tb: bool, batch: usize, m: usize, k: usize, n: usize) -> Var {
        assert_eq!(self.value(a).len(), batch * m * k);
        assert_eq!(self.value(b).len(), batch * k * n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![batch, m, n], Op::Bmm { a, b, ta, tb, batch, m, k, n }, ng)
    }

    /// 2-D convolution of `x [cin, h, w]` with `w [cout, cin, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, dil: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [c, h, w]");
        assert!(sw.len() == 4 && sw[1] == sx[0] && sw[2] == sw[3], "conv2d weight {:?} for input {:?}", sw, sx);
        let geom = ConvGeom { cin: sx[0], h: sx[1], w: sx[2], k: sw[2], stride, pad, dil };
        let (ho, wo) = geom.out_hw();
        let cout = sw[0];
        let kk = geom.cin * geom.k * geom.k;
        let p = ho * wo;
        let mut out = vec![T::zero(); cout * p];
        let cols = if geom.k == 1 && stride == 1 && pad == 0 {
            Vec::new()
        } else {
            kernels::im2col(self.value(x), &geom)
        };
        {
            let src = if cols.is_empty() { self.value(x) } else { &cols[..] };
            matmul_into(self.value(w), false, src, false, &mut out, cout, kk, p, false);
        }
        let ng = self.ng(x) || self.ng(w);
        let cols = if self.record && ng { cols } else { Vec::new() };
        self.push(out, vec![cout, ho, wo], Op::Conv { x, w, geom, cout, cols }, ng)
    }

    /// Convolution plus per-channel bias `[cout]`.
    pub fn conv2d_bias(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let y = self.conv2d(x, w, stride, pad, 1);
        let c = self.shape(b)[0];
        let b3 = self.reshape(b, &[c, 1, 1]);
        self.add_b(y, b3)
    }

    /// Depthwise 3x3 convolution, zero padding 1; `w [c, 3, 3]`.
    pub fn dwconv3(&mut self, x: Var, w: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.value(w).len(), s[0] * 9, "depthwise weight must hold 9 taps per channel");
        let out = kernels::dwconv3(self.value(x), self.value(w), s[0], s[1], s[2]);
        let ng = self.ng(x) || self.ng(w);
        self.push(out, s.clone(), Op::DwConv { x, w, c: s[0], h: s[1], w_: s[2] }, ng)
    }

    // ---- layout ------------------------------------------------------------

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let (out, shape) = kernels::permute(self.value(a), self.shape(a), perm);
        let ng = self.ng(a);
        self.push(out, shape, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.value(a).len(), "cannot reshape {:?} to {:?}", self.shape(a), shape);
        if self.shape(a) == shape {
            return a;
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(v, shape.to_vec(), Op::Reshape(a), ng)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing shapes differ");
            lead += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, shape, Op::Concat(parts.to_vec()), ng)
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(start + len <= s[0], "slice {}..{} out of {}", start, start + len, s[0]);
        let inner = numel(&s[1..]);
        let v = self.value(a)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let ng = self.ng(a);
        self.push(v, shape, Op::Slice { a, offset: start * inner }, ng)
    }

    /// `out[i] = a[idx[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(idx.len(), numel(shape));
        let av = self.value(a);
        let v = idx.iter().map(|&i| av[i]).collect();
        let ng = self.ng(a);
        self.push(v, shape.to_vec(), Op::Gather { a, idx }, ng)
    }

    // ---- normalization and reductions --------------------------------------

    fn layer_norm_generic(&mut self, a: Var, gamma: Var, beta: Var, outer: usize, n: usize, inner: usize) -> Var {
        assert_eq!(self.value(gamma).len(), n);
        assert_eq!(self.value(beta).len(), n);
        let eps = T::c(1e-5);
        let x = self.value(a);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); x.len()];
        let inv_n = T::one() / T::c(n as f64);
        if inner == 1 {
            for o in 0..outer {
                let row = &x[o * n..(o + 1) * n];
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o] = r;
                for j in 0..n {
                    let h = (row[j] - mean) * r;
                    xhat[o * n + j] = h;
                    out[o * n + j] = h * g[j] + b[j];
                }
            }
        } else {
            let mut mean = vec![T::zero(); inner];
            let mut var = vec![T::zero(); inner];
            for o in 0..outer {
                let base = o * n * inner;
                mean.iter_mut().for_each(|v| *v = T::zero());
                var.iter_mut().for_each(|v| *v = T::zero());
                for j in 0..n {
                    let row = &x[base + j * inner..base + (j + 1) * inner];
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m *= inv_n);
                for j in 0..n {
                    let row = &x[base + j * inner..base + (j + 1) * inner];
                    for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                        *s += (v - m) * (v - m);
                    }
                }
                let r = &mut rstd[o * inner..(o + 1) * inner];
                for (r, s) in r.iter_mut().zip(&var) {
                    *r = T::one() / (*s * inv_n + eps).sqrt();
                }
                for j in 0..n {
                    let off = base + j * inner;
                    for i in 0..inner {
                        let h = (x[off + i] - mean[i]) * r[i];
                        xhat[off + i] = h;
                        out[off + i] = h * g[j] + b[j];
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        let (xhat, rstd) = if self.record && ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::LayerNorm { a, gamma, beta, outer, n, inner, xhat, rstd }, ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let outer = self.value(a).len() / n;
        self.layer_norm_generic(a, gamma, beta, outer, n, 1)
    }

    /// Layer normalization over channels of a `[c, h, w]` feature map.
    pub fn layer_norm_channels(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = s[0];
        let inner = self.value(a).len() / n;
        self.layer_norm_generic(a, gamma, beta, 1, n, inner)
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::LogSoftmax(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Mean over the last axis; the axis is dropped.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap();
        let inv = T::one() / T::c(n as f64);
        let v = self.value(a).chunks(n).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        self.push(v, shape, Op::MeanLast(a, n), ng)
    }

    /// Global average pooling of `[c, h, w]` to `[c]`.
    pub fn gap(&mut self, a: Var) -> Var {
        let c = self.shape(a)[0];
        let n = self.value(a).len() / c;
        let r = self.reshape(a, &[c, n]);
        self.mean_last(r)
    }

    /// Row-wise L2 normalization of a `[rows, n]` matrix.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(nr);
            let inv = T::one() / nr;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::L2Rows { a, n, norms }, ng)
    }

    /// `pi * mask / sum(pi * mask)`, or all zeros when the masked sum is zero.
    pub fn masked_renorm(&mut self, a: Var, mask: &[T]) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len());
        let sum = av.iter().zip(mask).map(|(&p, &m)| p * m).sum::<T>();
        let out = if sum > T::zero() {
            av.iter().zip(mask).map(|(&p, &m)| p * m / sum).collect()
        } else {
            vec![T::zero(); av.len()]
        };
        let ng = self.ng(a);
        self.push(out, self.shape(a).to_vec(), Op::Renorm { a, mask: mask.to_vec(), sum }, ng)
    }

    // ---- spatial resampling --------------------------------------------------

    /// Pads `[c, h, w]` by `(top, bottom, left, right)`.
    pub fn pad2d(&mut self, a: Var, top: usize, bottom: usize, left: usize, right: usize, mode: PadMode) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let reflect = mode == PadMode::Reflect;
        let rows = kernels::pad_map(h, top, bottom, reflect);
        let cols = kernels::pad_map(w, left, right, reflect);
        self.pad_with_maps(a, c, h, w, rows, cols)
    }

    /// Crops `[c, h, w]` to the window at `(y0, x0)` of size `oh x ow`.
    pub fn crop2d(&mut self, a: Var, y0: usize, x0: usize, oh: usize, ow: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(y0 + oh <= h && x0 + ow <= w, "crop outside the image");
        if oh == h && ow == w {
            return a;
        }
        let rows = (y0..y0 + oh).map(Some).collect();
        let cols = (x0..x0 + ow).map(Some).collect();
        self.pad_with_maps(a, c, h, w, rows, cols)
    }

    fn pad_with_maps(&mut self, a: Var, c: usize, h: usize, w: usize, rows: Vec<Option<usize>>, cols: Vec<Option<usize>>) -> Var {
        let (oh, ow) = (rows.len(), cols.len());
        let mut out = vec![T::zero(); c * oh * ow];
        let x = self.value(a);
        for ch in 0..c {
            for (oy, ry) in rows.iter().enumerate() {
                let Some(iy) = ry else { continue };
                let src = &x[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for (d, cx) in dst.iter_mut().zip(&cols) {
                    if let Some(ix) = cx {
                        *d = src[*ix];
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, vec![c, oh, ow], Op::Pad { a, c, h, w, rows, cols }, ng)
    }

    /// Bilinear resize of `[c, h, w]` (half-pixel centers).
    pub fn resize(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let ph = LinearPlan::new(h, oh);
        let pw = LinearPlan::new(w, ow);
        let out = kernels::resize(self.value(a), c, &ph, &pw);
        let ng = self.ng(a);
        self.push(out, vec![c, oh, ow], Op::Resize { a, c, ph, pw }, ng)
    }

    /// `[c, h, w] -> [4c, h/2, w/2]`.
    pub fn pixel_unshuffle(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle needs even extents");
        let r = self.reshape(a, &[c, h / 2, 2, w / 2, 2]);
        let p = self.permute(r, &[0, 2, 4, 1, 3]);
        self.reshape(p, &[4 * c, h / 2, w / 2])
    }

    /// `[4c, h, w] -> [c, 2h, 2w]`.
    pub fn pixel_shuffle(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (c4, h, w) = (s[0], s[1], s[2]);
        assert_eq!(c4 % 4, 0);
        let c = c4 / 4;
        let r = self.reshape(a, &[c, 2, 2, h, w]);
        let p = self.permute(r, &[0, 3, 1, 4, 2]);
        self.reshape(p, &[c, 2 * h, 2 * w])
    }

    // ---- fused spectral and loss ops ---------------------------------------

    /// Per-channel spectral filtering of `x [c, h, w]` by a real, conjugate
    /// symmetric mask `[h, w]`: `ifft2(fft2(x) * mask)`. When `dc [c]` is
    /// given it replaces the zero-frequency entry of the mask per channel.
    pub fn spectral_filter(&mut self, x: Var, mask: Var, dc: Option<Var>) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert_eq!(self.shape(mask), &[h, w], "spectral mask must be [h, w]");
        if let Some(d) = dc {
            assert_eq!(self.value(d).len(), c);
        }
        let plan = Fft2::<T>::new(h, w);
        let hw = h * w;
        let mut out = vec![T::zero(); c * hw];
        let mut spec = Vec::with_capacity(c);
        let need = self.record && (self.ng(x) || self.ng(mask) || dc.is_some_and(|d| self.ng(d)));
        for ch in 0..c {
            let (re, im) = plan.forward_real(&self.value(x)[ch * hw..(ch + 1) * hw]);
            let m = self.value(mask);
            let mut fr: Vec<T> = re.iter().zip(m).map(|(&a, &b)| a * b).collect();
            let mut fi: Vec<T> = im.iter().zip(m).map(|(&a, &b)| a * b).collect();
            if let Some(d) = dc {
                let dv = self.value(d)[ch];
                fr[0] = re[0] * dv;
                fi[0] = im[0] * dv;
            }
            let y = plan.inverse_real(fr, fi);
            out[ch * hw..(ch + 1) * hw].copy_from_slice(&y);
            if need {
                spec.push((re, im));
            }
        }
        let ng = self.ng(x) || self.ng(mask) || dc.is_some_and(|d| self.ng(d));
        self.push(out, s, Op::Spectral { x, mask, dc, c, h, w, spec }, ng)
    }

    /// Scalar node whose gradients with respect to `inputs` were computed in
    /// the forward pass.
    pub fn precomputed(&mut self, value: T, inputs: Vec<(Var, Vec<T>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).len(), g.len());
        }
        let ng = inputs.iter().any(|(v, _)| self.ng(*v));
        self.push(vec![value], vec![1], Op::Precomputed(inputs), ng)
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let g = self.backward_seeded(loss, vec![T::one()]);
        self.param_grads(&g)
    }

    pub fn param_grads(&self, g: &NodeGrads<T>) -> Gradients<T> {
        let mut out = Gradients::new(self.params.len());
        for (i, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                if let Some(gv) = g.get(*v) {
                    let t = Tensor::from_vec(self.shape(*v), gv.to_vec());
                    out.accumulate(ParamId(i), &t);
                }
            }
        }
        out
    }

    /// Reverse pass from `root` with an explicit output cotangent.
    pub fn backward_seeded(&self, root: Var, seed: Vec<T>) -> NodeGrads<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(seed.len(), self.value(root).len());
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        NodeGrads { grads }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for (v, s) in [(*a, T::one()), (*b, T::one())] {
                    if self.ng(v) {
                        let d = acc(&mut grads[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += s * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, T::one()), (*b, -T::one())] {
                    if self.ng(v) {
                        let d = acc(&mut grads[v.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += s * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    let d = acc(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let d = acc(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddB(a, b, bs) => {
                if self.ng(*a) {
                    let d = acc(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if self.ng(*b) {
                    let d = acc(&mut grads[b.0], len(*b));
                    kernels::for_each_run(&node.shape, bs, |o, s, n, st| {
                        for k in 0..n {
                            d[s + k * st] += g[o + k];
                        }
                    });
                }
            }
            Op::MulB(a, b, bs) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = acc(&mut grads[a.0], g.len());
                    kernels::for_each_run(&node.shape, bs, |o, s, n, st| {
                        for k in 0..n {
                            d[o + k] += g[o + k] * bv[s + k * st];
                        }
                    });
                }
                if self.ng(*b) {
                    let d = acc(&mut grads[b.0], len(*b));
                    kernels::for_each_run(&node.shape, bs, |o, s, n, st| {
                        for k in 0..n {
                            d[s + k * st] += g[o + k] * av[o + k];
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let d = acc(&mut grads[a.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += *s * g);
            }
            Op::AddScalar(a) => {
                let d = acc(&mut grads[a.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            Op::ScaleBy(a, s) => {
                let f = self.value(*s)[0];
                if self.ng(*a) {
                    let d = acc(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += f * g);
                }
                if self.ng(*s) {
                    let dot = crate::real::dot(g, self.value(*a));
                    acc(&mut grads[s.0], 1)[0] += dot;
                }
            }
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = acc(&mut grads[a.0], g.len());
                let two = T::c(2.0);
                let half = T::c(0.5);
                for j in 0..g.len() {
                    let dy = match u {
                        Unary::Gelu => gelu_grad(x[j]),
                        Unary::Sigmoid => y[j] * (T::one() - y[j]),
                        Unary::Tanh => T::one() - y[j] * y[j],
                        Unary::Relu => {
                            if x[j] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => y[j],
                        Unary::Log => T::one() / x[j],
                        Unary::Abs => {
                            if x[j] > T::zero() {
                                T::one()
                            } else if x[j] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Sqrt => half / y[j],
                        Unary::Square => two * x[j],
                    };
                    d[j] += g[j] * dy;
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let d = acc(&mut grads[a.0], m * k);
                    if !*ta {
                        // dA[m,k] = G[m,n] * B^T
                        matmul_into(g, false, self.value(*b), !*tb, d, m, n, k, true);
                    } else {
                        // A stored [k,m]: dA = B * G^T  -> [k, m]
                        matmul_into(self.value(*b), *tb, g, true, d, k, n, m, true);
                    }
                }
                if self.ng(*b) {
                    let d = acc(&mut grads[b.0], k * n);
                    if !*tb {
                        // dB[k,n] = A^T G
                        matmul_into(self.value(*a), !*ta, g, false, d, k, m, n, true);
                    } else {
                        // B stored [n,k]: dB = G^T A -> [n, k]
                        matmul_into(g, true, self.value(*a), *ta, d, n, m, k, true);
                    }
                }
            }
            Op::Bmm { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let bv = self.value(*b);
                    let d = acc(&mut grads[a.0], batch * m * k);
                    for t in 0..*batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bv[t * k * n..(t + 1) * k * n];
                        let ds = &mut d[t * m * k..(t + 1) * m * k];
                        if !*ta {
                            matmul_into(gs, false, bs, !*tb, ds, m, n, k, true);
                        } else {
                            matmul_into(bs, *tb, gs, true, ds, k, n, m, true);
                        }
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let d = acc(&mut grads[b.0], batch * k * n);
                    for t in 0..*batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let ds = &mut d[t * k * n..(t + 1) * k * n];
                        if !*tb {
                            matmul_into(as_, !*ta, gs, false, ds, k, m, n, true);
                        } else {
                            matmul_into(gs, true, as_, *ta, ds, n, m, k, true);
                        }
                    }
                }
            }
            Op::Conv { x, w, geom, cout, cols } => {
                let (ho, wo) = geom.out_hw();
                let p = ho * wo;
                let kk = geom.cin * geom.k * geom.k;
                let direct = cols.is_empty();
                if self.ng(*w) {
                    let src = if direct { self.value(*x) } else { &cols[..] };
                    let d = acc(&mut grads[w.0], cout * kk);
                    matmul_into(g, false, src, true, d, *cout, p, kk, true);
                }
                if self.ng(*x) {
                    let nx = len(*x);
                    if direct {
                        let d = acc(&mut grads[x.0], nx);
                        matmul_into(self.value(*w), true, g, false, d, kk, *cout, p, true);
                    } else {
                        let mut gc = vec![T::zero(); kk * p];
                        matmul_into(self.value(*w), true, g, false, &mut gc, kk, *cout, p, false);
                        let d = acc(&mut grads[x.0], nx);
                        kernels::col2im(&gc, geom, d);
                    }
                }
            }
            Op::DwConv { x, w, c, h, w_ } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gx = if self.ng(*x) { Some(grads[x.0].take().unwrap_or_else(|| vec![T::zero(); xv.len()])) } else { None };
                let mut gw = if self.ng(*w) { Some(grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()])) } else { None };
                kernels::dwconv3_backward(xv, wv, g, *c, *h, *w_, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(g, &node.shape, &inv);
                let d = acc(&mut grads[a.0], g.len());
                d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g);
            }
            Op::Reshape(a) => {
                let d = acc(&mut grads[a.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if self.ng(*p) {
                        let d = acc(&mut grads[p.0], n);
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(d, &g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::Slice { a, offset } => {
                let d = acc(&mut grads[a.0], len(*a));
                d[*offset..*offset + g.len()].iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            Op::Gather { a, idx } => {
                let d = acc(&mut grads[a.0], len(*a));
                for (j, &k) in idx.iter().enumerate() {
                    d[k] += g[j];
                }
            }
            Op::LayerNorm { a, gamma, beta, outer, n, inner, xhat, rstd } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let gam = self.value(*gamma);
                if self.ng(*gamma) {
                    let d = acc(&mut grads[gamma.0], n);
                    for o in 0..outer {
                        for j in 0..n {
                            let off = (o * n + j) * inner;
                            d[j] += crate::real::dot(&g[off..off + inner], &xhat[off..off + inner]);
                        }
                    }
                }
                if self.ng(*beta) {
                    let d = acc(&mut grads[beta.0], n);
                    for o in 0..outer {
                        for j in 0..n {
                            let off = (o * n + j) * inner;
                            d[j] += g[off..off + inner].iter().copied().sum::<T>();
                        }
                    }
                }
                if self.ng(*a) {
                    let inv_n = T::one() / T::c(n as f64);
                    let d = acc(&mut grads[a.0], g.len());
                    let mut s1 = vec![T::zero(); inner];
                    let mut s2 = vec![T::zero(); inner];
                    for o in 0..outer {
                        s1.iter_mut().for_each(|v| *v = T::zero());
                        s2.iter_mut().for_each(|v| *v = T::zero());
                        for j in 0..n {
                            let off = (o * n + j) * inner;
                            for i in 0..inner {
                                let gh = g[off + i] * gam[j];
                                s1[i] += gh;
                                s2[i] += gh * xhat[off + i];
                            }
                        }
                        for j in 0..n {
                            let off = (o * n + j) * inner;
                            for i in 0..inner {
                                let gh = g[off + i] * gam[j];
                                d[off + i] += rstd[o * inner + i] * (gh - inv_n * (s1[i] + xhat[off + i] * s2[i]));
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let d = acc(&mut grads[a.0], g.len());
                for r in 0..g.len() / n {
                    let (gs, ys) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let s = crate::real::dot(gs, ys);
                    for j in 0..n {
                        d[r * n + j] += ys[j] * (gs[j] - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let d = acc(&mut grads[a.0], g.len());
                for r in 0..g.len() / n {
                    let gs = &g[r * n..(r + 1) * n];
                    let s = gs.iter().copied().sum::<T>();
                    for j in 0..n {
                        d[r * n + j] += gs[j] - y[r * n + j].exp() * s;
                    }
                }
            }
            Op::SumAll(a) => {
                let d = acc(&mut grads[a.0], len(*a));
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanLast(a, n) => {
                let inv = T::one() / T::c(*n as f64);
                let d = acc(&mut grads[a.0], len(*a));
                for (r, &gv) in g.iter().enumerate() {
                    d[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += gv * inv);
                }
            }
            Op::Pad { a, c, h, w, rows, cols } => {
                let (oh, ow) = (rows.len(), cols.len());
                let d = acc(&mut grads[a.0], c * h * w);
                for ch in 0..*c {
                    for (oy, ry) in rows.iter().enumerate() {
                        let Some(iy) = ry else { continue };
                        let src = &g[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                        let base = (ch * h + iy) * w;
                        for (s, cx) in src.iter().zip(cols) {
                            if let Some(ix) = cx {
                                d[base + ix] += *s;
                            }
                        }
                    }
                }
            }
            Op::Resize { a, c, ph, pw } => {
                let back = kernels::resize_backward(g, *c, ph, pw);
                let d = acc(&mut grads[a.0], back.len());
                d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g);
            }
            Op::Spectral { x, mask, dc, c, h, w, spec } => {
                let (c, h, w) = (*c, *h, *w);
                let hw = h * w;
                let plan = Fft2::<T>::new(h, w);
                let mv = self.value(*mask);
                let inv_n = T::one() / T::c(hw as f64);
                let want_m = self.ng(*mask);
                let want_dc = dc.is_some_and(|d| self.ng(d));
                let mut gm = if want_m { vec![T::zero(); hw] } else { Vec::new() };
                let mut gdc = vec![T::zero(); c];
                for ch in 0..c {
                    let (gr, gi) = plan.forward_real(&g[ch * hw..(ch + 1) * hw]);
                    if self.ng(*x) {
                        let mut fr: Vec<T> = gr.iter().zip(mv).map(|(&a, &b)| a * b).collect();
                        let mut fi: Vec<T> = gi.iter().zip(mv).map(|(&a, &b)| a * b).collect();
                        if let Some(d) = dc {
                            let dv = self.value(*d)[ch];
                            fr[0] = gr[0] * dv;
                            fi[0] = gi[0] * dv;
                        }
                        let back = plan.inverse_real(fr, fi);
                        let d = acc(&mut grads[x.0], c * hw);
                        d[ch * hw..(ch + 1) * hw].iter_mut().zip(&back).for_each(|(d, &g)| *d += g);
                    }
                    if want_m || want_dc {
                        let (fr, fi) = &spec[ch];
                        // dL/dM_k = Re(F_k conj(G_k)) / N
                        let start = if dc.is_some() { 1 } else { 0 };
                        if want_m {
                            for k in start..hw {
                                gm[k] += (fr[k] * gr[k] + fi[k] * gi[k]) * inv_n;
                            }
                        }
                        if dc.is_some() {
                            gdc[ch] = (fr[0] * gr[0] + fi[0] * gi[0]) * inv_n;
                        }
                    }
                }
                if want_m {
                    let d = acc(&mut grads[mask.0], hw);
                    d.iter_mut().zip(&gm).for_each(|(d, &g)| *d += g);
                }
                if let (Some(dv), true) = (dc, want_dc) {
                    let d = acc(&mut grads[dv.0], c);
                    d.iter_mut().zip(&gdc).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Precomputed(inputs) => {
                for (v, gv) in inputs {
                    if self.ng(*v) {
                        let d = acc(&mut grads[v.0], gv.len());
                        d.iter_mut().zip(gv).for_each(|(d, &x)| *d += g[0] * x);
                    }
                }
            }
            Op::Renorm { a, mask, sum } => {
                if *sum > T::zero() {
                    let y = &node.value;
                    let s = crate::real::dot(g, y);
                    let d = acc(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        d[j] += mask[j] / *sum * (g[j] - s);
                    }
                }
            }
            Op::L2Rows { a, n, norms } => {
                let y = &node.value;
                let d = acc(&mut grads[a.0], g.len());
                for (r, &nr) in norms.iter().enumerate() {
                    let (gs, ys) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let s = crate::real::dot(gs, ys);
                    for j in 0..*n {
                        d[r * n + j] += (gs[j] - ys[j] * s) / nr;
                    }
                }
            }
        }
    }
}
