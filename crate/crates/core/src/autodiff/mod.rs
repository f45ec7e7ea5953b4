//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] evaluates every primitive eagerly and records it on an
//! append-only tape, so inputs always precede their consumers. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients into every node
//! that depends on a parameter.
//!
//! Complex gradients follow the convention `G = dL/dRe(z) + i dL/dIm(z)` for a
//! real scalar loss `L`; for a linear map `z = A u` this gives `dL/du = A^H G`.
//!
//! Shape or dtype mismatches are caller bugs and panic with a message.

pub mod kernels;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;

use crate::fft;
use crate::so3::{self, HeadKind};
use crate::tensor::{numel, DType, Storage, Tensor};

use kernels::ConvDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphError {
    NotScalar(Vec<usize>),
    ComplexLoss,
    UnknownVar(usize),
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::NotScalar(s) => write!(f, "backward needs a scalar loss, got shape {s:?}"),
            GraphError::ComplexLoss => f.write_str("backward needs a real loss"),
            GraphError::UnknownVar(i) => write!(f, "variable {i} is not on this tape"),
        }
    }
}

impl core::error::Error for GraphError {}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d(Var, Var),
    AddBias(Var, Var),
    MaxPool(Var, Vec<usize>),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conj(Var),
    Fft { input: Var, ndims: usize, inverse: bool },
    RollHalf { input: Var, ndims: usize },
    Gather { volume: Var, coords: Var },
    RealPart(Var),
    ToComplex(Var),
    /// Flat index of every small-tensor entry inside the padded tensor.
    Pad(Var, Vec<usize>),
    Crop(Var, Vec<usize>),
    GatherRows { table: Var, rows: Vec<usize> },
    Rotation { raw: Var, kind: HeadKind, effective: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    head_perturbations: usize,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    assert_eq!(a.dtype(), b.dtype(), "{op}: dtype mismatch {} vs {}", a.dtype(), b.dtype());
}

fn zip_map(a: &Tensor, b: &Tensor, fr: impl Fn(f64, f64) -> f64, fc: impl Fn(Complex64, Complex64) -> Complex64) -> Tensor {
    match (a.storage(), b.storage()) {
        (Storage::Real(x), Storage::Real(y)) => {
            Tensor::real(a.shape(), x.iter().zip(y).map(|(&p, &q)| fr(p, q)).collect())
        }
        (Storage::Complex(x), Storage::Complex(y)) => {
            Tensor::complex(a.shape(), x.iter().zip(y).map(|(&p, &q)| fc(p, q)).collect())
        }
        _ => unreachable!("dtypes checked by caller"),
    }
}

/// Shape bookkeeping for (optionally batched, optionally broadcast) matmul.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> MatMulDims {
    let (ab, m, k) = match a {
        [m, k] => (None, *m, *k),
        [bt, m, k] => (Some(*bt), *m, *k),
        _ => panic!("matmul: lhs must be rank 2 or 3, got {a:?}"),
    };
    let (bb, k2, n) = match b {
        [k, n] => (None, *k, *n),
        [bt, k, n] => (Some(*bt), *k, *n),
        _ => panic!("matmul: rhs must be rank 2 or 3, got {b:?}"),
    };
    assert_eq!(k, k2, "matmul: inner extents differ ({a:?} x {b:?})");
    if let (Some(x), Some(y)) = (ab, bb) {
        assert_eq!(x, y, "matmul: batch extents differ ({a:?} x {b:?})");
    }
    MatMulDims {
        batch: ab.or(bb).unwrap_or(1),
        m,
        k,
        n,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    }
}

fn conv_dims(x: &[usize], k: &[usize]) -> ConvDims {
    let (batch, cin, h, w) = match x {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => panic!("conv2d: input must be [C,H,W] or [B,C,H,W], got {x:?}"),
    };
    assert!(
        k.len() == 4 && k[1] == cin && k[2] == 3 && k[3] == 3,
        "conv2d: kernel {k:?} incompatible with input {x:?} (expected [O,{cin},3,3])"
    );
    ConvDims { batch, cin, cout: k[0], h, w }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of degenerate s2s2 outputs that were nudged before use.
    pub fn head_perturbations(&self) -> usize {
        self.head_perturbations
    }

    /// Registers a leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y);
        let out = zip_map(x, y, |p, q| p + q, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y);
        let out = zip_map(x, y, |p, q| p - q, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product (real x real or complex x complex).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y);
        let out = zip_map(x, y, |p, q| p * q, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scaled(factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Real matmul of `[m,k]` or `[B,m,k]` by `[k,n]` or `[B,k,n]`; an
    /// unbatched operand is broadcast across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let d = matmul_dims(x.shape(), y.shape());
        let (xa, yb) = (x.as_real(), y.as_real());
        let mut out = vec![0.0; d.batch * d.m * d.n];
        for bt in 0..d.batch {
            let ao = if d.a_batched { bt * d.m * d.k } else { 0 };
            let bo = if d.b_batched { bt * d.k * d.n } else { 0 };
            kernels::gemm(
                d.m,
                d.k,
                d.n,
                &xa[ao..ao + d.m * d.k],
                false,
                &yb[bo..bo + d.k * d.n],
                false,
                &mut out[bt * d.m * d.n..(bt + 1) * d.m * d.n],
                false,
            );
        }
        let shape: Vec<usize> = if d.a_batched || d.b_batched {
            vec![d.batch, d.m, d.n]
        } else {
            vec![d.m, d.n]
        };
        self.push(Tensor::real(&shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// 3x3 convolution (cross-correlation), stride 1, zero "same" padding.
    /// Input `[C,H,W]` or `[B,C,H,W]`, kernel `[O,C,3,3]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Var {
        let (xi, ki) = (self.value(x), self.value(kernel));
        let d = conv_dims(xi.shape(), ki.shape());
        let out = kernels::conv2d_forward(xi.as_real(), ki.as_real(), &d);
        let shape: Vec<usize> = if xi.rank() == 3 {
            vec![d.cout, d.h, d.w]
        } else {
            vec![d.batch, d.cout, d.h, d.w]
        };
        self.push(Tensor::real(&shape, out), Op::Conv2d(x, kernel), &[x, kernel])
    }

    /// Adds `bias[c]` along axis 1 of a `[B, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xi, bi) = (self.value(x), self.value(bias));
        let s = xi.shape();
        assert!(s.len() >= 2 && bi.shape() == [s[1]], "add_bias: bias {:?} vs input {s:?}", bi.shape());
        let inner: usize = s[2..].iter().product();
        let c = s[1];
        let b = bi.as_real();
        let out: Vec<f64> = xi
            .as_real()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % c])
            .collect();
        let shape = s.to_vec();
        self.push(Tensor::real(&shape, out), Op::AddBias(x, bias), &[x, bias])
    }

    /// 2x2 max pooling with stride 2 over the last two axes.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let xi = self.value(x);
        let s = xi.shape();
        assert!(s.len() >= 2, "maxpool2: rank {} < 2", s.len());
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: odd spatial extent {s:?}");
        let planes = numel(&s[..s.len() - 2]);
        let (out, arg) = kernels::maxpool2_forward(xi.as_real(), planes, h, w);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        self.push(Tensor::real(&shape, out), Op::MaxPool(x, arg), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.value(x);
        let out = Tensor::real(xi.shape(), xi.as_real().iter().map(|v| v.max(0.0)).collect());
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().with_shape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = match self.value(x).storage() {
            Storage::Real(v) => Tensor::scalar(v.iter().sum()),
            Storage::Complex(v) => Tensor::complex(&[], vec![v.iter().sum()]),
        };
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let out = match self.value(x).storage() {
            Storage::Real(v) => Tensor::scalar(v.iter().sum::<f64>() / n),
            Storage::Complex(v) => Tensor::complex(&[], vec![v.iter().sum::<Complex64>() / n]),
        };
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn conj(&mut self, x: Var) -> Var {
        let xi = self.value(x);
        let out = Tensor::complex(xi.shape(), xi.as_complex().iter().map(|z| z.conj()).collect());
        self.push(out, Op::Conj(x), &[x])
    }

    fn fft_op(&mut self, x: Var, ndims: usize, inverse: bool) -> Var {
        let xi = self.value(x);
        let shape = xi.shape().to_vec();
        let mut data = xi.as_complex().to_vec();
        fft::fft_last_axes(&mut data, &shape, ndims, inverse);
        self.push(Tensor::complex(&shape, data), Op::Fft { input: x, ndims, inverse }, &[x])
    }

    /// Unnormalized forward transform over the last two axes.
    pub fn fft2(&mut self, x: Var) -> Var {
        self.fft_op(x, 2, false)
    }

    /// Inverse transform over the last two axes, scaled by `1/(H W)`.
    pub fn ifft2(&mut self, x: Var) -> Var {
        self.fft_op(x, 2, true)
    }

    /// Unnormalized forward transform over the last three axes.
    pub fn fft3(&mut self, x: Var) -> Var {
        self.fft_op(x, 3, false)
    }

    pub fn ifft3(&mut self, x: Var) -> Var {
        self.fft_op(x, 3, true)
    }

    /// `fftshift` over the last `ndims` (even) axes.
    pub fn roll_half(&mut self, x: Var, ndims: usize) -> Var {
        let xi = self.value(x);
        let shape = xi.shape().to_vec();
        assert!(shape[shape.len() - ndims..].iter().all(|n| n % 2 == 0), "roll_half: odd extent in {shape:?}");
        let out = match xi.storage() {
            Storage::Real(v) => Tensor::real(&shape, fft::roll_half(v, &shape, ndims)),
            Storage::Complex(v) => Tensor::complex(&shape, fft::roll_half(v, &shape, ndims)),
        };
        self.push(out, Op::RollHalf { input: x, ndims }, &[x])
    }

    /// Trilinear samples of a complex `[n,n,n]` cube in FFT layout at real
    /// `[..., 3]` frequency coordinates `(kx, ky, kz)`; output drops the last
    /// axis. Differentiable in both the cube and the coordinates.
    pub fn gather_trilinear(&mut self, volume: Var, coords: Var) -> Var {
        let (v, c) = (self.value(volume), self.value(coords));
        let n = v.shape()[0];
        assert_eq!(v.shape(), [n, n, n], "gather_trilinear: volume must be cubic");
        assert_eq!(c.shape().last(), Some(&3), "gather_trilinear: coords must end in 3");
        let out = kernels::gather_forward(v.as_complex(), n, c.as_real());
        let shape = &c.shape()[..c.rank() - 1];
        let out = Tensor::complex(shape, out);
        self.push(out, Op::Gather { volume, coords }, &[volume, coords])
    }

    pub fn real_part(&mut self, x: Var) -> Var {
        let xi = self.value(x);
        let out = Tensor::real(xi.shape(), xi.as_complex().iter().map(|z| z.re).collect());
        self.push(out, Op::RealPart(x), &[x])
    }

    pub fn to_complex(&mut self, x: Var) -> Var {
        let out = self.value(x).to_complex();
        self.push(out, Op::ToComplex(x), &[x])
    }

    /// Zero-pads each of the last `ndims` axes from `n` to `size`, keeping
    /// index `n/2` at `size/2`.
    pub fn pad_center(&mut self, x: Var, size: usize, ndims: usize) -> Var {
        let xi = self.value(x);
        let small = xi.shape().to_vec();
        let map = center_map(&small, ndims, size);
        let big = resized(&small, ndims, size);
        let mut out = vec![0.0; numel(&big)];
        for (i, v) in xi.as_real().iter().enumerate() {
            out[map[i]] = *v;
        }
        self.push(Tensor::real(&big, out), Op::Pad(x, map), &[x])
    }

    /// Central `size`-wide window of each of the last `ndims` axes (adjoint
    /// of [`Graph::pad_center`]).
    pub fn crop_center(&mut self, x: Var, size: usize, ndims: usize) -> Var {
        let xi = self.value(x);
        let small = resized(xi.shape(), ndims, size);
        let map = center_map(&small, ndims, xi.shape()[xi.rank() - 1]);
        let src = xi.as_real();
        let out = map.iter().map(|&j| src[j]).collect();
        self.push(Tensor::real(&small, out), Op::Crop(x, map), &[x])
    }

    /// Selects rows of a `[M, D]` table into a `[rows.len(), D]` tensor.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "gather_rows: table must be rank 2");
        let d = t.shape()[1];
        let src = t.as_real();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < t.shape()[0], "gather_rows: row {r} out of range");
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let out = Tensor::real(&[rows.len(), d], out);
        self.push(out, Op::GatherRows { table, rows: rows.to_vec() }, &[table])
    }

    /// Maps `[B, raw_dim]` head outputs to `[B, 3, 3]` rotation matrices.
    /// Degenerate s2s2 rows are nudged deterministically and counted.
    pub fn rotation_head(&mut self, raw: Var, kind: HeadKind) -> Var {
        let t = self.value(raw);
        let k = kind.raw_dim();
        assert!(t.rank() == 2 && t.shape()[1] == k, "rotation_head: {:?} for {} head", t.shape(), kind.name());
        let b = t.shape()[0];
        let mut effective = t.as_real().to_vec();
        let mut out = Vec::with_capacity(b * 9);
        let mut nudged = 0;
        for row in effective.chunks_exact_mut(k) {
            let m = match so3::head_matrix(kind, row) {
                Ok(m) => m,
                Err(_) => {
                    nudged += 1;
                    nudge_s2s2(row);
                    so3::head_matrix(kind, row).expect("nudged s2s2 input is regular")
                }
            };
            out.extend(m.iter().flatten());
        }
        self.head_perturbations += nudged;
        let out = Tensor::real(&[b, 3, 3], out);
        self.push(out, Op::Rotation { raw, kind, effective }, &[raw])
    }

    /// Reverse pass from a real scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let node = self.nodes.get(loss.0).ok_or(GraphError::UnknownVar(loss.0))?;
        if node.value.len() != 1 {
            return Err(GraphError::NotScalar(node.value.shape().to_vec()));
        }
        if node.value.dtype() != DType::Real {
            return Err(GraphError::ComplexLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(node.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(y, g, |p, q| p * q, |p, q| p.conj() * q));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, zip_map(x, g, |p, q| p * q, |p, q| p.conj() * q));
                }
            }
            Op::Scale(a, f) => self.acc(grads, *a, g.scaled(*f)),
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let d = matmul_dims(x.shape(), y.shape());
                let (xa, yb, gg) = (x.as_real(), y.as_real(), g.as_real());
                let mut da = self.wants(*a).then(|| vec![0.0; xa.len()]);
                let mut db = self.wants(*b).then(|| vec![0.0; yb.len()]);
                for bt in 0..d.batch {
                    let ao = if d.a_batched { bt * d.m * d.k } else { 0 };
                    let bo = if d.b_batched { bt * d.k * d.n } else { 0 };
                    let gs = &gg[bt * d.m * d.n..(bt + 1) * d.m * d.n];
                    if let Some(da) = da.as_mut() {
                        let dst = &mut da[ao..ao + d.m * d.k];
                        kernels::gemm(d.m, d.n, d.k, gs, false, &yb[bo..bo + d.k * d.n], true, dst, true);
                    }
                    if let Some(db) = db.as_mut() {
                        let dst = &mut db[bo..bo + d.k * d.n];
                        kernels::gemm(d.k, d.m, d.n, &xa[ao..ao + d.m * d.k], true, gs, false, dst, true);
                    }
                }
                if let Some(da) = da {
                    self.acc(grads, *a, Tensor::real(x.shape(), da));
                }
                if let Some(db) = db {
                    self.acc(grads, *b, Tensor::real(y.shape(), db));
                }
            }
            Op::Conv2d(x, k) => {
                let (xi, ki) = (self.value(*x), self.value(*k));
                let d = conv_dims(xi.shape(), ki.shape());
                let (dx, dk) = kernels::conv2d_backward(
                    xi.as_real(),
                    ki.as_real(),
                    g.as_real(),
                    &d,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::real(xi.shape(), dx));
                }
                if let Some(dk) = dk {
                    self.acc(grads, *k, Tensor::real(ki.shape(), dk));
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let s = out.shape();
                    let inner: usize = s[2..].iter().product();
                    let c = s[1];
                    let mut db = vec![0.0; c];
                    for (i, v) in g.as_real().iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    self.acc(grads, *b, Tensor::real(&[c], db));
                }
            }
            Op::MaxPool(x, arg) => {
                let xi = self.value(*x);
                let mut dx = vec![0.0; xi.len()];
                for (&src, v) in arg.iter().zip(g.as_real()) {
                    dx[src] += v;
                }
                self.acc(grads, *x, Tensor::real(xi.shape(), dx));
            }
            Op::Relu(x) => {
                let xi = self.value(*x);
                let dx = xi
                    .as_real()
                    .iter()
                    .zip(g.as_real())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::real(xi.shape(), dx));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().with_shape(&s));
            }
            Op::Sum(x) | Op::Mean(x) => {
                let xi = self.value(*x);
                let scale = if matches!(self.nodes[i].op, Op::Mean(_)) { 1.0 / xi.len() as f64 } else { 1.0 };
                let t = match g.storage() {
                    Storage::Real(v) => {
                        let dt = xi.dtype();
                        match dt {
                            DType::Real => Tensor::filled(xi.shape(), v[0] * scale),
                            DType::Complex => Tensor::complex(xi.shape(), vec![Complex64::new(v[0] * scale, 0.0); xi.len()]),
                        }
                    }
                    Storage::Complex(v) => Tensor::complex(xi.shape(), vec![v[0] * scale; xi.len()]),
                };
                self.acc(grads, *x, t);
            }
            Op::Conj(x) => {
                let t = Tensor::complex(g.shape(), g.as_complex().iter().map(|z| z.conj()).collect());
                self.acc(grads, *x, t);
            }
            Op::Fft { input, ndims, inverse } => {
                let shape = g.shape().to_vec();
                let count: usize = shape[shape.len() - ndims..].iter().product();
                let mut data = g.as_complex().to_vec();
                // Adjoint of the unnormalized DFT is count * IDFT, and vice versa.
                fft::fft_last_axes(&mut data, &shape, *ndims, !inverse);
                let s = if *inverse { 1.0 / count as f64 } else { count as f64 };
                data.iter_mut().for_each(|z| *z *= s);
                self.acc(grads, *input, Tensor::complex(&shape, data));
            }
            Op::RollHalf { input, ndims } => {
                let shape = g.shape().to_vec();
                let t = match g.storage() {
                    Storage::Real(v) => Tensor::real(&shape, fft::roll_half(v, &shape, *ndims)),
                    Storage::Complex(v) => Tensor::complex(&shape, fft::roll_half(v, &shape, *ndims)),
                };
                self.acc(grads, *input, t);
            }
            Op::Gather { volume, coords } => {
                let (v, c) = (self.value(*volume), self.value(*coords));
                let n = v.shape()[0];
                let mut dv = self.wants(*volume).then(|| vec![Complex64::new(0.0, 0.0); v.len()]);
                let mut dc = self.wants(*coords).then(|| vec![0.0; c.len()]);
                kernels::gather_backward(
                    v.as_complex(),
                    n,
                    c.as_real(),
                    g.as_complex(),
                    dv.as_deref_mut(),
                    dc.as_deref_mut(),
                );
                if let Some(dv) = dv {
                    self.acc(grads, *volume, Tensor::complex(v.shape(), dv));
                }
                if let Some(dc) = dc {
                    self.acc(grads, *coords, Tensor::real(c.shape(), dc));
                }
            }
            Op::RealPart(x) => {
                let t = Tensor::complex(g.shape(), g.as_real().iter().map(|&r| Complex64::new(r, 0.0)).collect());
                self.acc(grads, *x, t);
            }
            Op::ToComplex(x) => {
                let t = Tensor::real(g.shape(), g.as_complex().iter().map(|z| z.re).collect());
                self.acc(grads, *x, t);
            }
            Op::Pad(x, map) => {
                let xi = self.value(*x);
                let src = g.as_real();
                let dx = map.iter().map(|&j| src[j]).collect();
                self.acc(grads, *x, Tensor::real(xi.shape(), dx));
            }
            Op::Crop(x, map) => {
                let xi = self.value(*x);
                let mut dx = vec![0.0; xi.len()];
                for (v, &j) in g.as_real().iter().zip(map) {
                    dx[j] = *v;
                }
                self.acc(grads, *x, Tensor::real(xi.shape(), dx));
            }
            Op::GatherRows { table, rows } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dt[r * d + c] += g.as_real()[j * d + c];
                    }
                }
                self.acc(grads, *table, Tensor::real(t.shape(), dt));
            }
            Op::Rotation { raw, kind, effective } => {
                let k = kind.raw_dim();
                let gg = g.as_real();
                let mut dr = vec![0.0; effective.len()];
                for (b, row) in effective.chunks_exact(k).enumerate() {
                    let j = so3::head_jacobian(*kind, row).expect("forward pass stored a regular input");
                    for o in 0..9 {
                        let go = gg[b * 9 + o];
                        for p in 0..k {
                            dr[b * k + p] += go * j[o * k + p];
                        }
                    }
                }
                let s = self.value(*raw).shape().to_vec();
                self.acc(grads, *raw, Tensor::real(&s, dr));
            }
        }
    }

    /// Short description of the tape, one op per line (debugging aid).
    pub fn describe(&self) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "{i}: {:?} {:?}", n.value.shape(), op_name(&n.op));
        }
        s
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Conv2d(..) => "conv2d",
        Op::AddBias(..) => "add_bias",
        Op::MaxPool(..) => "maxpool2",
        Op::Relu(..) => "relu",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Conj(..) => "conj",
        Op::Fft { .. } => "fft",
        Op::RollHalf { .. } => "roll_half",
        Op::Gather { .. } => "gather_trilinear",
        Op::RealPart(..) => "real_part",
        Op::ToComplex(..) => "to_complex",
        Op::Pad(..) => "pad_center",
        Op::Crop(..) => "crop_center",
        Op::GatherRows { .. } => "gather_rows",
        Op::Rotation { .. } => "rotation_head",
    }
}

fn resized(shape: &[usize], ndims: usize, size: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - ndims..].iter_mut().for_each(|e| *e = size);
    s
}

/// For a tensor of shape `small`, the flat index of each entry once its last
/// `ndims` axes are centered inside extent `big`.
fn center_map(small: &[usize], ndims: usize, big: usize) -> Vec<usize> {
    let r = small.len();
    assert!(ndims <= r, "pad/crop: rank {r} < {ndims}");
    for &n in &small[r - ndims..] {
        assert!(big >= n && (big - n) % 2 == 0, "pad/crop: cannot center {n} inside {big}");
    }
    let large = resized(small, ndims, big);
    let mut map = Vec::with_capacity(numel(small));
    let mut idx = vec![0usize; r];
    for _ in 0..numel(small) {
        let mut flat = 0;
        for a in 0..r {
            let off = if a >= r - ndims { (big - small[a]) / 2 } else { 0 };
            flat = flat * large[a] + idx[a] + off;
        }
        map.push(flat);
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < small[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    map
}

/// Deterministic fix-up for a degenerate s2s2 row: replace a vanishing first
/// vector, then tilt a collinear second vector off the first.
fn nudge_s2s2(row: &mut [f64]) {
    let n1 = libm::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
    if !(n1 > so3::S2S2_EPS) {
        row[0] += 1e-6;
    }
    for axis in 0..3 {
        if so3::head_matrix(HeadKind::S2s2, row).is_ok() {
            return;
        }
        row[3 + axis] += 1e-6;
    }
}
