//! Reverse-mode differentiable values.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when any
//! input requires a gradient, the operation that produced it. Node ids come from a
//! global monotonic counter, so every parent has a smaller id than its children and
//! sorting reachable nodes by descending id is a valid reverse topological order.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::array::{inverse_axes, permute_data, Array, Scalar};
use crate::error::{Error, Result};
use crate::rng::Generator;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub struct Var<S: Scalar = f32>(Rc<Node<S>>);

impl<S: Scalar> Clone for Var<S> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

struct Node<S: Scalar> {
    id: u64,
    value: Array<S>,
    requires_grad: bool,
    op: Op<S>,
    grad: RefCell<Option<Array<S>>>,
}

/// Convolution geometry shared by forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(Var<S>, Var<S>),
    Bmm {
        a: Var<S>,
        b: Var<S>,
        trans_b: bool,
    },
    Add(Var<S>, Var<S>),
    Sub(Var<S>, Var<S>),
    Mul(Var<S>, Var<S>),
    Scale(Var<S>, S),
    AddBroadcast(Var<S>, Var<S>),
    Gelu(Var<S>),
    Relu(Var<S>),
    Softmax {
        x: Var<S>,
        axis: usize,
    },
    LayerNorm {
        x: Var<S>,
        gain: Var<S>,
        bias: Var<S>,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    CrossEntropy {
        logits: Var<S>,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Reshape(Var<S>),
    Permute {
        x: Var<S>,
        axes: Vec<usize>,
    },
    GatherRows {
        table: Var<S>,
        idx: Vec<usize>,
    },
    GatherLast {
        x: Var<S>,
        idx: Vec<usize>,
    },
    Sum(Var<S>),
    Mean(Var<S>),
    Conv2d {
        x: Var<S>,
        w: Var<S>,
        spec: Conv2dSpec,
    },
    Upsample2x(Var<S>),
    Dropout {
        x: Var<S>,
        mask: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<&Var<S>> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::Bmm { a, b, .. } => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Upsample2x(a)
            | Op::Softmax { x: a, .. }
            | Op::Permute { x: a, .. }
            | Op::GatherLast { x: a, .. }
            | Op::Dropout { x: a, .. }
            | Op::CrossEntropy { logits: a, .. }
            | Op::GatherRows { table: a, .. } => vec![a],
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Var<S> {
    pub(crate) fn leaf(value: Array<S>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: Op::Leaf,
            grad: RefCell::new(None),
        }))
    }

    fn from_op(value: Array<S>, op: Op<S>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // Untracked results drop their parents so intermediates are freed eagerly.
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
            grad: RefCell::new(None),
        }))
    }

    pub fn value(&self) -> &Array<S> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient of a leaf after `Tape::backward`.
    pub fn grad(&self) -> Option<Array<S>> {
        self.0.grad.borrow().clone()
    }

    /// Same value, cut from the graph (stop-gradient).
    pub fn detach(&self) -> Self {
        Var::leaf(self.0.value.clone(), false)
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading axes are flattened into rows.
    pub fn matmul(&self, b: &Var<S>) -> Result<Self> {
        let (av, bv) = (self.value(), b.value());
        if bv.rank() != 2 || av.rank() == 0 || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let k = bv.shape()[0];
        let n = bv.shape()[1];
        let m = av.len() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, av.data(), false, bv.data(), false, S::zero(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Var::from_op(
            Array::new(shape, out)?,
            Op::MatMul(self.clone(), b.clone()),
        ))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `· [B, n, k]ᵀ` when `trans_b`.
    pub fn bmm(&self, b: &Var<S>, trans_b: bool) -> Result<Self> {
        let (av, bv) = (self.value(), b.value());
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("bmm", av.shape(), bv.shape()));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(shape_err("bmm", av.shape(), bv.shape()));
        }
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(Var::from_op(
            Array::new(vec![batch, m, n], out)?,
            Op::Bmm {
                a: self.clone(),
                b: b.clone(),
                trans_b,
            },
        ))
    }

    fn zip_same(&self, b: &Var<S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Array<S>> {
        if self.shape() != b.shape() {
            return Err(shape_err(name, self.shape(), b.shape()));
        }
        let data = self
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(self.shape().to_vec(), data)
    }

    pub fn add(&self, b: &Var<S>) -> Result<Self> {
        let v = self.zip_same(b, "add", |x, y| x + y)?;
        Ok(Var::from_op(v, Op::Add(self.clone(), b.clone())))
    }

    pub fn sub(&self, b: &Var<S>) -> Result<Self> {
        let v = self.zip_same(b, "sub", |x, y| x - y)?;
        Ok(Var::from_op(v, Op::Sub(self.clone(), b.clone())))
    }

    pub fn mul(&self, b: &Var<S>) -> Result<Self> {
        let v = self.zip_same(b, "mul", |x, y| x * y)?;
        Ok(Var::from_op(v, Op::Mul(self.clone(), b.clone())))
    }

    pub fn scale(&self, factor: S) -> Self {
        let v = self.value().map(|x| x * factor);
        Var::from_op(v, Op::Scale(self.clone(), factor))
    }

    /// Adds `b` to every leading-axis slice of `self`; `b.shape` must be a suffix of `self.shape`.
    pub fn add_broadcast(&self, b: &Var<S>) -> Result<Self> {
        let (av, bv) = (self.value(), b.value());
        if bv.rank() > av.rank() || !av.shape().ends_with(bv.shape()) {
            return Err(shape_err("add_broadcast", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        let n = bv.len();
        if n > 0 {
            for chunk in out.data_mut().chunks_mut(n) {
                for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                    *o += x;
                }
            }
        }
        Ok(Var::from_op(out, Op::AddBroadcast(self.clone(), b.clone())))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        let c = S::lit(GELU_C);
        let a = S::lit(GELU_A);
        let half = S::lit(0.5);
        let v = self
            .value()
            .map(|x| half * x * (S::one() + (c * (x + a * x * x * x)).tanh()));
        Var::from_op(v, Op::Gelu(self.clone()))
    }

    pub fn relu(&self) -> Self {
        let v = self.value().map(|x| x.max(S::zero()));
        Var::from_op(v, Op::Relu(self.clone()))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let xv = self.value();
        if axis >= xv.rank() {
            return Err(Error::InvalidShape(format!(
                "softmax axis {axis} for shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = S::one() / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        Ok(Var::from_op(
            Array::new(xv.shape().to_vec(), out)?,
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Normalizes each last-axis vector to zero mean / unit variance, then applies `gain`, `bias`.
    pub fn layer_norm(&self, gain: &Var<S>, bias: &Var<S>, eps: S) -> Result<Self> {
        let xv = self.value();
        let d = xv.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gain.shape()));
        }
        if eps <= S::zero() {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        let inv_d = S::one() / S::lit(d as f64);
        let (g, b) = (gain.value().data(), bias.value().data());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(Var::from_op(
            Array::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `selected` is true.
    ///
    /// `self` is `[.., K]` logits with one row per target. An empty selection yields 0.
    pub fn cross_entropy(&self, targets: &[usize], selected: &[bool]) -> Result<Self> {
        let lv = self.value();
        let k = lv.last_dim();
        let n = lv.len() / k.max(1);
        if targets.len() != n || selected.len() != n {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut rows = Vec::new();
        let mut tgts = Vec::new();
        for (r, (&t, &sel)) in targets.iter().zip(selected).enumerate() {
            if !sel {
                continue;
            }
            if t >= k {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: k,
                });
            }
            rows.push(r);
            tgts.push(t);
        }
        let mut probs = Vec::with_capacity(rows.len() * k);
        let mut total = 0.0f64;
        for (&r, &t) in rows.iter().zip(&tgts) {
            let row = &lv.data()[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += (lse - row[t]).as_f64();
            probs.extend(row.iter().map(|&x| (x - mx).exp() / sum));
        }
        let loss = if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        };
        Ok(Var::from_op(
            Array::scalar(S::lit(loss)),
            Op::CrossEntropy {
                logits: self.clone(),
                rows,
                targets: tgts,
                probs,
            },
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let v = self.value().clone().reshape(shape)?;
        Ok(Var::from_op(v, Op::Reshape(self.clone())))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let v = self.value().permute(axes)?;
        Ok(Var::from_op(
            v,
            Op::Permute {
                x: self.clone(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Row lookup `table[idx[i], :]`; `self` is a `[V, d]` table.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let tv = self.value();
        if tv.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "gather_rows needs a 2-d table, got {:?}",
                tv.shape()
            )));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        Ok(Var::from_op(
            Array::new(vec![idx.len(), d], out)?,
            Op::GatherRows {
                table: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    /// Selects along the last axis: `out[.., i] = self[.., idx[i]]`, then reshapes the
    /// selection to `tail`.
    pub fn gather_last(&self, idx: &[usize], tail: &[usize]) -> Result<Self> {
        let xv = self.value();
        let r = xv.last_dim();
        if tail.iter().product::<usize>() != idx.len() {
            return Err(shape_err("gather_last", &[idx.len()], tail));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                what: "gather_last",
                index: bad,
                bound: r,
            });
        }
        let outer = xv.len() / r.max(1);
        let mut out = Vec::with_capacity(outer * idx.len());
        for o in 0..outer {
            let row = &xv.data()[o * r..(o + 1) * r];
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = xv.shape()[..xv.rank().saturating_sub(1)].to_vec();
        shape.extend_from_slice(tail);
        Ok(Var::from_op(
            Array::new(shape, out)?,
            Op::GatherLast {
                x: self.clone(),
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Self {
        Var::from_op(Array::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = S::lit(self.value().len().max(1) as f64);
        Var::from_op(Array::scalar(self.value().sum() / n), Op::Mean(self.clone()))
    }

    /// NHWC convolution; `w` is `[kh, kw, c_in, c_out]`.
    pub fn conv2d(&self, w: &Var<S>, spec: Conv2dSpec) -> Result<Self> {
        let geo = ConvGeometry::new(self.shape(), w.shape(), spec)?;
        let cols = geo.im2col(self.value().data());
        let mut out = vec![S::zero(); geo.out_rows() * geo.c_out];
        S::gemm(
            geo.out_rows(),
            geo.patch(),
            geo.c_out,
            &cols,
            false,
            w.value().data(),
            false,
            S::zero(),
            &mut out,
        );
        Ok(Var::from_op(
            Array::new(vec![geo.n, geo.ho, geo.wo, geo.c_out], out)?,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                spec,
            },
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling of an NHWC array.
    pub fn upsample2x(&self) -> Result<Self> {
        let xv = self.value();
        if xv.rank() != 4 {
            return Err(Error::InvalidShape(format!(
                "upsample2x needs NHWC, got {:?}",
                xv.shape()
            )));
        }
        let [n, h, w, c] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let mut out = vec![S::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = ((b * h + y / 2) * w + x / 2) * c;
                    let dst = ((b * 2 * h + y) * 2 * w + x) * c;
                    out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        Ok(Var::from_op(
            Array::new(vec![n, 2 * h, 2 * w, c], out)?,
            Op::Upsample2x(self.clone()),
        ))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout(&self, p: f64, gen: &mut Generator) -> Self {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value().len())
            .map(|_| {
                if gen.rng().random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value()
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let v = Array::new(self.shape().to_vec(), data).expect("same shape");
        Var::from_op(
            v,
            Op::Dropout {
                x: self.clone(),
                mask,
            },
        )
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[3] != w[2] || spec.stride == 0 {
            return Err(shape_err("conv2d", x, w));
        }
        let (h, wd) = (x[1] + 2 * spec.pad, x[2] + 2 * spec.pad);
        if h < w[0] || wd < w[1] {
            return Err(shape_err("conv2d", x, w));
        }
        Ok(Self {
            n: x[0],
            h: x[1],
            w: x[2],
            c_in: x[3],
            kh: w[0],
            kw: w[1],
            c_out: w[3],
            ho: (h - w[0]) / spec.stride + 1,
            wo: (wd - w[1]) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    fn out_rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    /// Visits every (patch row, column offset, source offset) triple inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let c = self.c_in;
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * self.kw + kx) * c;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * c;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let p = self.patch();
        let c = self.c_in;
        let mut cols = vec![S::zero(); self.out_rows() * p];
        self.for_each_tap(|row, col, src| {
            cols[row * p + col..row * p + col + c].copy_from_slice(&x[src..src + c]);
        });
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S]) -> Vec<S> {
        let p = self.patch();
        let c = self.c_in;
        let mut x = vec![S::zero(); self.n * self.h * self.w * c];
        self.for_each_tap(|row, col, src| {
            for i in 0..c {
                x[src + i] += cols[row * p + col + i];
            }
        });
        x
    }
}

struct Grads<S: Scalar>(HashMap<u64, Array<S>>);

impl<S: Scalar> Grads<S> {
    fn add(&mut self, v: &Var<S>, g: Array<S>) {
        if !v.requires_grad() {
            return;
        }
        match self.0.get_mut(&v.0.id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.0.insert(v.0.id, g);
            }
        }
    }
}

fn arr<S: Scalar>(shape: &[usize], data: Vec<S>) -> Array<S> {
    Array::new(shape.to_vec(), data).expect("gradient shape matches its value")
}

/// Runs reverse accumulation from a scalar `loss`, storing gradients on leaves.
pub(crate) fn backpropagate<S: Scalar>(loss: &Var<S>) -> Result<()> {
    if loss.value().len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let mut seen = HashSet::new();
    let mut order: Vec<Var<S>> = Vec::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        for p in v.0.op.parents() {
            stack.push(p.clone());
        }
        order.push(v);
    }
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let mut grads = Grads(HashMap::new());
    grads.add(loss, Array::full(loss.shape().to_vec(), S::one()));
    for node in &order {
        let Some(g) = grads.0.remove(&node.0.id) else {
            continue;
        };
        if let Op::Leaf = node.0.op {
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
            continue;
        }
        propagate(&node.0, g, &mut grads);
    }
    Ok(())
}

fn propagate<S: Scalar>(node: &Node<S>, g: Array<S>, grads: &mut Grads<S>) {
    let out = &node.value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (a.value(), b.value());
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.len() / k.max(1);
            if a.requires_grad() {
                let mut ga = vec![S::zero(); m * k];
                S::gemm(m, n, k, gd, false, bv.data(), true, S::zero(), &mut ga);
                grads.add(a, arr(av.shape(), ga));
            }
            if b.requires_grad() {
                let mut gb = vec![S::zero(); k * n];
                S::gemm(k, m, n, av.data(), true, gd, false, S::zero(), &mut gb);
                grads.add(b, arr(bv.shape(), gb));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (a.value(), b.value());
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = out.shape()[2];
            if a.requires_grad() {
                let mut ga = vec![S::zero(); batch * m * k];
                for i in 0..batch {
                    S::gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        S::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                grads.add(a, arr(av.shape(), ga));
            }
            if b.requires_grad() {
                let mut gb = vec![S::zero(); batch * k * n];
                for i in 0..batch {
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // d(stored [n,k]) = gᵀ · a
                        S::gemm(n, m, k, gi, true, ai, false, S::zero(), dst);
                    } else {
                        S::gemm(k, m, n, ai, true, gi, false, S::zero(), dst);
                    }
                }
                grads.add(b, arr(bv.shape(), gb));
            }
        }
        Op::Add(a, b) => {
            grads.add(a, g.clone());
            grads.add(b, g);
        }
        Op::Sub(a, b) => {
            if b.requires_grad() {
                grads.add(b, g.map(|x| -x));
            }
            grads.add(a, g);
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let d = gd.iter().zip(b.value().data()).map(|(&x, &y)| x * y).collect();
                grads.add(a, arr(a.shape(), d));
            }
            if b.requires_grad() {
                let d = gd.iter().zip(a.value().data()).map(|(&x, &y)| x * y).collect();
                grads.add(b, arr(b.shape(), d));
            }
        }
        Op::Scale(a, f) => grads.add(a, g.map(|x| x * *f)),
        Op::AddBroadcast(a, b) => {
            if b.requires_grad() {
                let n = b.value().len();
                let mut gb = vec![S::zero(); n];
                if n > 0 {
                    for chunk in gd.chunks(n) {
                        for (o, &x) in gb.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
                grads.add(b, arr(b.shape(), gb));
            }
            grads.add(a, g);
        }
        Op::Gelu(a) => {
            let c = S::lit(GELU_C);
            let k = S::lit(GELU_A);
            let half = S::lit(0.5);
            let three = S::lit(3.0);
            let d = gd
                .iter()
                .zip(a.value().data())
                .map(|(&gi, &x)| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (S::one() - t * t) * c * (S::one() + three * k * x * x);
                    gi * (half * (S::one() + t) + half * x * dt)
                })
                .collect();
            grads.add(a, arr(a.shape(), d));
        }
        Op::Relu(a) => {
            let d = gd
                .iter()
                .zip(a.value().data())
                .map(|(&gi, &x)| if x > S::zero() { gi } else { S::zero() })
                .collect();
            grads.add(a, arr(a.shape(), d));
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = S::zero();
                    for j in 0..len {
                        dot += gd[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = y[p] * (gd[p] - dot);
                    }
                }
            }
            grads.add(x, arr(x.shape(), gx));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = x.value().last_dim();
            let rows = rstd.len();
            let gv = gain.value().data();
            if gain.requires_grad() || bias.requires_grad() {
                let mut gg = vec![S::zero(); d];
                let mut gb = vec![S::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat[r * d + j];
                        gb[j] += gd[r * d + j];
                    }
                }
                grads.add(gain, arr(&[d], gg));
                grads.add(bias, arr(&[d], gb));
            }
            if x.requires_grad() {
                let inv_d = S::one() / S::lit(d as f64);
                let mut gx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let gh = gd[r * d + j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat[r * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let gh = gd[r * d + j] * gv[j];
                        gx[r * d + j] = rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                    }
                }
                grads.add(x, arr(x.shape(), gx));
            }
        }
        Op::CrossEntropy {
            logits,
            rows,
            targets,
            probs,
        } => {
            let lv = logits.value();
            let k = lv.last_dim();
            let mut gl = vec![S::zero(); lv.len()];
            if !rows.is_empty() {
                let scale = gd[0] / S::lit(rows.len() as f64);
                for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    for j in 0..k {
                        gl[r * k + j] = probs[i * k + j] * scale;
                    }
                    gl[r * k + t] -= scale;
                }
            }
            grads.add(logits, arr(lv.shape(), gl));
        }
        Op::Reshape(a) => {
            let shape = a.shape().to_vec();
            grads.add(a, g.reshape(shape).expect("reshape back"));
        }
        Op::Permute { x, axes } => {
            let inv = inverse_axes(axes);
            let (shape, data) = permute_data(gd, out.shape(), &inv);
            debug_assert_eq!(shape, x.shape());
            grads.add(x, arr(&shape, data));
        }
        Op::GatherRows { table, idx } => {
            let d = table.value().shape()[1];
            let mut gt = vec![S::zero(); table.value().len()];
            for (i, &r) in idx.iter().enumerate() {
                for j in 0..d {
                    gt[r * d + j] += gd[i * d + j];
                }
            }
            grads.add(table, arr(table.shape(), gt));
        }
        Op::GatherLast { x, idx } => {
            let r = x.value().last_dim();
            let outer = x.value().len() / r.max(1);
            let mut gx = vec![S::zero(); x.value().len()];
            let m = idx.len();
            for o in 0..outer {
                for (i, &src) in idx.iter().enumerate() {
                    gx[o * r + src] += gd[o * m + i];
                }
            }
            grads.add(x, arr(x.shape(), gx));
        }
        Op::Sum(a) => grads.add(a, Array::full(a.shape().to_vec(), gd[0])),
        Op::Mean(a) => {
            let n = S::lit(a.value().len().max(1) as f64);
            grads.add(a, Array::full(a.shape().to_vec(), gd[0] / n));
        }
        Op::Conv2d { x, w, spec } => {
            let geo = ConvGeometry::new(x.shape(), w.shape(), *spec).expect("validated in forward");
            let (rows, p, co) = (geo.out_rows(), geo.patch(), geo.c_out);
            if w.requires_grad() {
                let cols = geo.im2col(x.value().data());
                let mut gw = vec![S::zero(); p * co];
                S::gemm(p, rows, co, &cols, true, gd, false, S::zero(), &mut gw);
                grads.add(w, arr(w.shape(), gw));
            }
            if x.requires_grad() {
                let mut gcols = vec![S::zero(); rows * p];
                S::gemm(rows, co, p, gd, false, w.value().data(), true, S::zero(), &mut gcols);
                grads.add(x, arr(x.shape(), geo.col2im(&gcols)));
            }
        }
        Op::Upsample2x(a) => {
            let s = a.shape();
            let [n, h, w, c] = [s[0], s[1], s[2], s[3]];
            let mut ga = vec![S::zero(); a.value().len()];
            for b in 0..n {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let dst = ((b * h + y / 2) * w + x / 2) * c;
                        let src = ((b * 2 * h + y) * 2 * w + x) * c;
                        for i in 0..c {
                            ga[dst + i] += gd[src + i];
                        }
                    }
                }
            }
            grads.add(a, arr(s, ga));
        }
        Op::Dropout { x, mask } => {
            let d = gd.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
            grads.add(x, arr(x.shape(), d));
        }
    }
}
