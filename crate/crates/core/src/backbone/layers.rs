//! Building blocks shared by the encoder and the decoder.
//!
//! Layers hold parameter ids only, so one architecture value serves any
//! precision of the same [`ParamSet`].

use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, ParamId, ParamKind, ParamSet};
use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::numerics::{Tensor, Var};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-6;

/// Registers freshly initialised base parameters under a name prefix.
pub(crate) struct Builder<'a, T> {
    pub params: &'a mut ParamSet<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.params.add(name, ParamKind::Base, tensor.with_requires_grad(true))
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape, bound, &mut self.rng);
        self.add(name, t)
    }

    pub fn embedding(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = Tensor::randn(shape, 1.0, &mut self.rng);
        self.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(value)))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = b.fan_in(&format!("{name}.weight"), &[d_out, d_in], d_in);
        let bias = bias.then(|| b.fan_in(&format!("{name}.bias"), &[d_out], d_in));
        Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let bias = self.bias.map(|id| ctx.p(id));
        let y = ctx.tape.linear(x, w, bias)?;
        match &self.lora {
            Some(adapter) if adapter.is_attached() => adapter.add_delta(ctx, x, y),
            _ => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.constant(&format!("{name}.weight"), &[dim], 1.0),
            beta: b.constant(&format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Normalises the channel axis of a `[C, H, W]` map.
    pub fn forward_chw<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let hwc = ctx.tape.permute(x, &[1, 2, 0])?;
        let y = self.forward(ctx, hwc)?;
        ctx.tape.permute(y, &[2, 0, 1])
    }
}

/// Multi-head attention with separate query/key/value/output projections.
/// The key/value inputs may have a different length from the queries.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize, downsample: usize) -> Self {
        let inner = dim / downsample;
        assert!(heads > 0 && inner % heads == 0, "{name}: {inner} channels over {heads} heads");
        Self {
            q: Linear::new(b, &format!("{name}.q"), dim, inner, true),
            k: Linear::new(b, &format!("{name}.k"), dim, inner, true),
            v: Linear::new(b, &format!("{name}.v"), dim, inner, true),
            out: Linear::new(b, &format!("{name}.out"), inner, dim, true),
            heads,
            inner,
        }
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }

    // [B, N, inner] -> [B*heads, N, head_dim]
    fn split_heads<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (bsz, n) = (ctx.tape.shape(x)[0], ctx.tape.shape(x)[1]);
        let hd = self.inner / self.heads;
        let x = ctx.tape.reshape(x, &[bsz, n, self.heads, hd])?;
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        ctx.tape.reshape(x, &[bsz * self.heads, n, hd])
    }

    /// `q [B, Nq, D]`, `k`/`v` `[B, Nk, D]`; 2-D inputs are treated as `B = 1`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let two_d = ctx.tape.shape(q).len() == 2;
        let lift = |ctx: &mut Ctx<T>, x: Var| -> Result<Var> {
            if two_d {
                let s = ctx.tape.shape(x).to_vec();
                ctx.tape.reshape(x, &[1, s[0], s[1]])
            } else {
                Ok(x)
            }
        };
        let (q, k, v) = (lift(ctx, q)?, lift(ctx, k)?, lift(ctx, v)?);
        let (bsz, nq) = (ctx.tape.shape(q)[0], ctx.tape.shape(q)[1]);

        let q = self.q.forward(ctx, q)?;
        let k = self.k.forward(ctx, k)?;
        let v = self.v.forward(ctx, v)?;
        let q = self.split_heads(ctx, q)?;
        let k = self.split_heads(ctx, k)?;
        let v = self.split_heads(ctx, v)?;

        let hd = self.inner / self.heads;
        let scores = ctx.tape.matmul_ex(q, k, true)?;
        let scores = ctx.tape.scale(scores, T::lit(1.0 / (hd as f64).sqrt()));
        let attn = ctx.tape.softmax_lastaxis(scores)?;
        let mixed = ctx.tape.matmul(attn, v)?;

        let mixed = ctx.tape.reshape(mixed, &[bsz, self.heads, nq, hd])?;
        let mixed = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = ctx.tape.reshape(mixed, &[bsz, nq, self.inner])?;
        let y = self.out.forward(ctx, mixed)?;
        if two_d {
            let d = self.out.d_out;
            ctx.tape.reshape(y, &[nq, d])
        } else {
            Ok(y)
        }
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(b, &format!("{name}.fc{i}"), d[0], d[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i < last {
                x = ctx.tape.gelu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub(crate) fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: b.fan_in(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], fan_in),
            bias: b.fan_in(&format!("{name}.bias"), &[c_out], fan_in),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, bias) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.conv2d(x, w, Some(bias), self.stride, self.pad)
    }
}

/// Stride-2, kernel-2 transposed convolution doubling the spatial size.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample2x {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        let fan_in = c_out * 4;
        Self {
            weight: b.fan_in(&format!("{name}.weight"), &[c_in, c_out, 2, 2], fan_in),
            bias: b.fan_in(&format!("{name}.bias"), &[c_out], fan_in),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, bias) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.conv_transpose2d(x, w, Some(bias), 2, 0)
    }
}

/// `[H, W, C] -> [H*W, C]` and back without copying semantics.
pub(crate) fn flatten_hw<T: Scalar>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    ctx.tape.reshape(x, &[s[0] * s[1], s[2]])
}
