//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value and the parent
//! handles needed for the vector-Jacobian product. `backward` walks the nodes
//! in reverse recording order, which is a valid topological order because a
//! node can only reference nodes recorded before it.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    AddScalar(Var),
    Ln(Var),
    Powf { x: Var, exponent: T },
    Sigmoid(Var),
    Gelu(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Linear { x: Var, w: Var, bias: Option<Var>, rows: usize, din: usize, dout: usize },
    Softmax { x: Var, width: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, width: usize, stats: Vec<(T, T)> },
    Reshape(Var),
    Gather { x: Var, index: Arc<Vec<usize>>, width: usize },
    Narrow { x: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize, total: usize },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, out_ch: usize },
    ConvTranspose2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, in_ch: usize },
    Resize { x: Var, channels: usize, from: (usize, usize), to: (usize, usize) },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations. One tape serves one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies the forward value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Records a tensor; it participates in differentiation iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::invalid("constant", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Adds a 1-D `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [width] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks_exact(width)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias { x, bias }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.node(x).requires_grad;
        self.push(self.shape(x).to_vec(), value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: T, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, c)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn powf(&mut self, x: Var, exponent: T) -> Var {
        self.unary(x, |v| v.powf(exponent), Op::Powf { x, exponent })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![s / n], Op::Mean(x), rg)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix product of `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    /// With `trans_b`, `b` is given as `[n, k]` / `[b, n, k]`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                (1, *m, *k, kb, n)
            }
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                (*ba, *m, *k, kb, n)
            }
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut value = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                kernels::matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut value[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    trans_b,
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, value, Op::MatMul { a, b, batch, m, k, n, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `x [.., din] -> x * w^T + bias`, with `w` shaped `[dout, din]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().ok_or_else(|| Error::invalid("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut value = vec![T::zero(); rows * dout];
        kernels::matmul_into(self.value(x), self.value(w), &mut value, rows, din, dout, true, false);
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in value.chunks_exact_mut(dout) {
                add_into(row, bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(shape, value, Op::Linear { x, w, bias, rows, din, dout }, rg))
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let value = kernels::softmax_rows(self.value(x), width);
        let rg = self.node(x).requires_grad;
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, width }, rg))
    }

    /// Normalises over the last axis, then applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let inv_w = T::one() / T::lit(width as f64);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = vec![T::zero(); self.value(x).len()];
        let mut stats = Vec::with_capacity(value.len() / width);
        for (src, dst) in self.value(x).chunks_exact(width).zip(value.chunks_exact_mut(width)) {
            let mean = src.iter().copied().sum::<T>() * inv_w;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let rstd = T::one() / (var + eps).sqrt();
            for i in 0..width {
                dst[i] = (src[i] - mean) * rstd * g[i] + b[i];
            }
            stats.push((mean, rstd));
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::LayerNorm { x, gamma, beta, width, stats },
            rg,
        ))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Reorders rows of width `width`: output row `i` is input row `index[i]`.
    /// `index` must be a permutation for the adjoint to be exact.
    fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, width: usize, shape: Vec<usize>) -> Var {
        let value = kernels::gather_rows(self.value(x), &index, width);
        let rg = self.node(x).requires_grad;
        self.push(shape, value, Op::Gather { x, index, width }, rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        // Keep the innermost axis contiguous when it does not move.
        let (index, width) = if rank > 1 && axes[rank - 1] == rank - 1 {
            (kernels::permute_index(&shape[..rank - 1], &axes[..rank - 1]), shape[rank - 1])
        } else {
            (kernels::permute_index(&shape, axes), 1)
        };
        Ok(self.gather(x, Arc::new(index), width, out_shape))
    }

    /// `[H, W, C] -> [nW, ws*ws, C]`.
    pub fn window_partition(&mut self, x: Var, ws: usize) -> Result<Var> {
        let [h, w, c] = *self.shape(x) else {
            return Err(Error::invalid("window_partition", format!("need [H, W, C], got {:?}", self.shape(x))));
        };
        if ws == 0 || h % ws != 0 || w % ws != 0 {
            return Err(Error::invalid("window_partition", format!("window {ws} does not tile {h}x{w}")));
        }
        let index = kernels::window_index(h, w, ws);
        Ok(self.gather(x, Arc::new(index), c, vec![(h / ws) * (w / ws), ws * ws, c]))
    }

    /// `[nW, ws*ws, C] -> [H, W, C]`, inverse of [`Tape::window_partition`].
    pub fn window_unpartition(&mut self, x: Var, ws: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if ws == 0 || h % ws != 0 || w % ws != 0 || s.len() != 3 || s[0] != (h / ws) * (w / ws) || s[1] != ws * ws {
            return Err(Error::invalid("window_unpartition", format!("{s:?} with window {ws} into {h}x{w}")));
        }
        let c = s[2];
        let forward = kernels::window_index(h, w, ws);
        let mut inverse = vec![0; forward.len()];
        for (i, &src) in forward.iter().enumerate() {
            inverse[src] = i;
        }
        Ok(self.gather(x, Arc::new(inverse), c, vec![h, w, c]))
    }

    fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, axis_len, inner) = Self::split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.node(x).requires_grad;
        Ok(self.push(out_shape, value, Op::Narrow { x, outer, axis_len, inner, start, len }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let (outer, _, inner) = Self::split_axis(&first, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p);
                value.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        let parts = parts.iter().copied().zip(lens).collect();
        Ok(self.push(shape, value, Op::Concat { parts, outer, inner, total }, rg))
    }

    // ---- spatial ------------------------------------------------------------

    /// `x [C, H, W]`, `w [O, C, kh, kw]` -> `[O, OH, OW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c, h, wd], [o, wc, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("conv2d", &xs, &ws));
        };
        if c != wc || stride == 0 || h + 2 * pad < *kh || wd + 2 * pad < *kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [*o] {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: *c,
            large_h: *h,
            large_w: *wd,
            small_h: (h + 2 * pad - kh) / stride + 1,
            small_w: (wd + 2 * pad - kw) / stride + 1,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
        };
        let cols = kernels::im2col(self.value(x), &geom);
        let spatial = geom.col_cols();
        let mut value = vec![T::zero(); o * spatial];
        kernels::matmul_into(self.value(w), &cols, &mut value, *o, geom.col_rows(), spatial, false, false);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (row, &bias_v) in value.chunks_exact_mut(spatial).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias_v);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        let shape = vec![*o, geom.small_h, geom.small_w];
        Ok(self.push(shape, value, Op::Conv2d { x, w, bias, geom, out_ch: *o }, rg))
    }

    /// `x [C, H, W]`, `w [C, O, k, k]` -> `[O, (H-1)*s - 2p + k, ...]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c, h, wd], [wc, o, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        };
        if c != wc || stride == 0 || *h == 0 || *wd == 0 || (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [*o] {
                return Err(Error::shape("conv_transpose2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: *o,
            large_h: (h - 1) * stride + kh - 2 * pad,
            large_w: (wd - 1) * stride + kw - 2 * pad,
            small_h: *h,
            small_w: *wd,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
        };
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        kernels::matmul_tn_into(self.value(w), self.value(x), &mut cols, *c, geom.col_rows(), geom.col_cols(), false);
        let plane = geom.large_h * geom.large_w;
        let mut value = vec![T::zero(); o * plane];
        kernels::col2im(&cols, &geom, &mut value);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (row, &bias_v) in value.chunks_exact_mut(plane).zip(bv) {
                row.iter_mut().for_each(|v| *v += bias_v);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        let shape = vec![*o, geom.large_h, geom.large_w];
        Ok(self.push(shape, value, Op::ConvTranspose2d { x, w, bias, geom, in_ch: *c }, rg))
    }

    /// Bilinear resample of `[C, H, W]` with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = *self.shape(x) else {
            return Err(Error::invalid("resize_bilinear", format!("need [C, H, W], got {:?}", self.shape(x))));
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("resize_bilinear", "zero-sized dimension"));
        }
        let value = kernels::bilinear_forward(self.value(x), c, (h, w), (out_h, out_w));
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![c, out_h, out_w],
            value,
            Op::Resize { x, channels: c, from: (h, w), to: (out_h, out_w) },
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Gradient of the last `backward` call with respect to `v`, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a single-element output. Replaces results of any
    /// earlier call. Leaf gradients are retained; intermediate ones are freed.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.node(output);
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if out.requires_grad {
            grads[output.0] = Some(vec![T::one()]);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] / bv[i];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(d) = self.slot(grads, *x) {
                    add_into(d, g);
                }
                if let Some(d) = self.slot(grads, *bias) {
                    let width = d.len();
                    for row in g.chunks_exact(width) {
                        add_into(d, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *factor);
                }
            }
            Op::AddScalar(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    add_into(d, g);
                }
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        d[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Powf { x, exponent } => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    let p1 = *exponent - T::one();
                    for i in 0..g.len() {
                        d[i] += g[i] * *exponent * xv[i].powf(p1);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    let s = g[0] / T::lit(d.len() as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MatMul { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        // dA = dY * B^T, with B stored [k, n] or [n, k].
                        kernels::matmul_into(gi, bi, di, m, n, k, !*trans_b, true);
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::matmul_tn_into(gi, ai, di, m, n, k, true);
                        } else {
                            kernels::matmul_tn_into(ai, gi, di, m, k, n, true);
                        }
                    }
                }
            }
            Op::Linear { x, w, bias, rows, din, dout } => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::matmul_into(g, self.value(*w), d, *rows, *dout, *din, false, true);
                }
                if let Some(d) = self.slot(grads, *w) {
                    kernels::matmul_tn_into(g, self.value(*x), d, *rows, *dout, *din, true);
                }
                if let Some(b) = bias {
                    if let Some(d) = self.slot(grads, *b) {
                        for row in g.chunks_exact(*dout) {
                            add_into(d, row);
                        }
                    }
                }
            }
            Op::Softmax { x, width } => {
                let y = &node.value;
                if let Some(d) = self.slot(grads, *x) {
                    for ((yr, gr), dr) in y.chunks_exact(*width).zip(g.chunks_exact(*width)).zip(d.chunks_exact_mut(*width)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..*width {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, width, stats } => {
                let w = *width;
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let inv_w = T::one() / T::lit(w as f64);
                if let Some(d) = self.slot(grads, *x) {
                    let mut ghat = vec![T::zero(); w];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..w {
                            ghat[i] = gr[i] * gv[i];
                            s1 += ghat[i];
                            s2 += ghat[i] * (xr[i] - mean) * rstd;
                        }
                        s1 *= inv_w;
                        s2 *= inv_w;
                        let dr = &mut d[r * w..(r + 1) * w];
                        for i in 0..w {
                            let xhat = (xr[i] - mean) * rstd;
                            dr[i] += rstd * (ghat[i] - s1 - xhat * s2);
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *gamma) {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        for i in 0..w {
                            d[i] += g[r * w + i] * (xv[r * w + i] - mean) * rstd;
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *beta) {
                    for row in g.chunks_exact(w) {
                        add_into(d, row);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    add_into(d, g);
                }
            }
            Op::Gather { x, index, width } => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::scatter_add_rows(g, index, *width, d);
                }
            }
            Op::Narrow { x, outer, axis_len, inner, start, len } => {
                if let Some(d) = self.slot(grads, *x) {
                    let chunk = len * inner;
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        add_into(&mut d[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                    }
                }
            }
            Op::Concat { parts, outer, inner, total } => {
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(d) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, bias, geom, out_ch } => {
                let spatial = geom.col_cols();
                let ckk = geom.col_rows();
                if let Some(d) = self.slot(grads, *w) {
                    let cols = kernels::im2col(self.value(*x), geom);
                    kernels::matmul_into(g, &cols, d, *out_ch, spatial, ckk, true, true);
                }
                if let Some(d) = self.slot(grads, *x) {
                    let mut dcols = vec![T::zero(); ckk * spatial];
                    kernels::matmul_tn_into(self.value(*w), g, &mut dcols, *out_ch, ckk, spatial, false);
                    kernels::col2im(&dcols, geom, d);
                }
                if let Some(b) = bias {
                    if let Some(d) = self.slot(grads, *b) {
                        for (db, row) in d.iter_mut().zip(g.chunks_exact(spatial)) {
                            *db += row.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::ConvTranspose2d { x, w, bias, geom, in_ch } => {
                let okk = geom.col_rows();
                let hw = geom.col_cols();
                let needs_x = self.nodes[x.0].requires_grad;
                let needs_w = self.nodes[w.0].requires_grad;
                if needs_x || needs_w {
                    let dcols = kernels::im2col(g, geom);
                    if let Some(d) = self.slot(grads, *x) {
                        kernels::matmul_into(self.value(*w), &dcols, d, *in_ch, okk, hw, false, true);
                    }
                    if let Some(d) = self.slot(grads, *w) {
                        kernels::matmul_into(self.value(*x), &dcols, d, *in_ch, hw, okk, true, true);
                    }
                }
                if let Some(b) = bias {
                    if let Some(d) = self.slot(grads, *b) {
                        let plane = geom.large_h * geom.large_w;
                        for (db, row) in d.iter_mut().zip(g.chunks_exact(plane)) {
                            *db += row.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::Resize { x, channels, from, to } => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::bilinear_backward(g, *channels, *from, *to, d);
                }
            }
        }
    }
}
