//! Feature neck and the two-way attention mask decoder.

use serde::{Deserialize, Serialize};

use super::encoder::FeaturePyramid;
use super::layers::{flatten_hw, Attention, Builder, LayerNorm, Linear, Mlp, Upsample2x};
use super::params::{Ctx, ParamId};
use super::posenc;
use super::prompt::PromptTokens;
use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_attention_blocks: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Cross-attention works in `token_dim / attention_downsample` channels.
    pub attention_downsample: usize,
    pub num_mask_tokens: usize,
    /// Channel widths after the two stride-2 transposed convolutions.
    pub upsample_dims: [usize; 2],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_attention_blocks: 2,
            token_dim: 256,
            heads: 8,
            mlp_dim: 2048,
            attention_downsample: 2,
            num_mask_tokens: 1,
            upsample_dims: [64, 32],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.num_mask_tokens != 1 {
            return fail(format!("exactly one mask token is supported, got {}", self.num_mask_tokens));
        }
        if self.num_attention_blocks == 0 {
            return fail("need at least one attention block".into());
        }
        if self.token_dim % 4 != 0 {
            return fail(format!("token_dim {} must be a multiple of 4", self.token_dim));
        }
        let inner = self.token_dim / self.attention_downsample.max(1);
        if self.attention_downsample == 0
            || self.heads == 0
            || self.token_dim % self.heads != 0
            || inner % self.heads != 0
        {
            return fail(format!(
                "{} heads incompatible with token_dim {} / downsample {}",
                self.heads, self.token_dim, self.attention_downsample
            ));
        }
        if self.upsample_dims.contains(&0) || self.mlp_dim == 0 {
            return fail("zero-sized layer".into());
        }
        Ok(())
    }
}

/// Projects every pyramid level to the token width and folds the deepest
/// level into the stride-16 map.
#[derive(Debug, Clone)]
pub struct Neck {
    pub lateral: Vec<Linear>,
}

/// Channels-last maps at strides 4, 8 and 16, all `token_dim` wide.
#[derive(Debug, Clone, Copy)]
pub struct NeckOutput {
    pub s4: Var,
    pub s8: Var,
    pub s16: Var,
}

/// Bilinear 2x upsampling of a channels-last map.
fn upsample_hwc<T: Scalar>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let [h, w, _] = *ctx.tape.shape(x) else { unreachable!("token maps are [H, W, C]") };
    let chw = ctx.tape.permute(x, &[2, 0, 1])?;
    let up = ctx.tape.resize_bilinear(chw, 2 * h, 2 * w)?;
    ctx.tape.permute(up, &[1, 2, 0])
}

impl Neck {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, dims: &[usize], token_dim: usize) -> Self {
        let lateral = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(b, &format!("neck.lateral{i}"), d, token_dim, true))
            .collect();
        Self { lateral }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, f: &FeaturePyramid) -> Result<NeckOutput> {
        let s4 = self.lateral[0].forward(ctx, f.maps[0])?;
        let s8 = self.lateral[1].forward(ctx, f.maps[1])?;
        let s16 = self.lateral[2].forward(ctx, f.maps[2])?;
        let s32 = self.lateral[3].forward(ctx, f.maps[3])?;
        let top = upsample_hwc(ctx, s32)?;
        let s16 = ctx.tape.add(s16, top)?;
        Ok(NeckOutput { s4, s8, s16 })
    }
}

#[derive(Debug, Clone)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_image_to_token: Attention,
    pub norm4: LayerNorm,
    pub skip_first_pe: bool,
}

impl TwoWayBlock {
    fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        queries: Var,
        keys: Var,
        query_pe: Var,
        key_pe: Var,
    ) -> Result<(Var, Var)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(ctx, queries, queries, queries)?
        } else {
            let q = ctx.tape.add(queries, query_pe)?;
            let a = self.self_attn.forward(ctx, q, q, queries)?;
            ctx.tape.add(queries, a)?
        };
        let queries = self.norm1.forward(ctx, queries)?;

        let q = ctx.tape.add(queries, query_pe)?;
        let k = ctx.tape.add(keys, key_pe)?;
        let a = self.cross_token_to_image.forward(ctx, q, k, keys)?;
        let queries = ctx.tape.add(queries, a)?;
        let queries = self.norm2.forward(ctx, queries)?;

        let m = self.mlp.forward(ctx, queries)?;
        let queries = ctx.tape.add(queries, m)?;
        let queries = self.norm3.forward(ctx, queries)?;

        let q = ctx.tape.add(queries, query_pe)?;
        let k = ctx.tape.add(keys, key_pe)?;
        let a = self.cross_image_to_token.forward(ctx, k, q, queries)?;
        let keys = ctx.tape.add(keys, a)?;
        let keys = self.norm4.forward(ctx, keys)?;
        Ok((queries, keys))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub mask_token: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub norm_final: LayerNorm,
    pub up1: Upsample2x,
    pub up_norm: LayerNorm,
    pub up2: Upsample2x,
    pub skip_s8: Linear,
    pub skip_s4: Linear,
    pub hyper: Mlp,
}

impl MaskDecoder {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let [u1, u2] = cfg.upsample_dims;
        let blocks = (0..cfg.num_attention_blocks)
            .map(|i| {
                let p = format!("decoder.block{i}");
                TwoWayBlock {
                    self_attn: Attention::new(b, &format!("{p}.self_attn"), d, cfg.heads, 1),
                    norm1: LayerNorm::new(b, &format!("{p}.norm1"), d),
                    cross_token_to_image: Attention::new(
                        b,
                        &format!("{p}.cross_t2i"),
                        d,
                        cfg.heads,
                        cfg.attention_downsample,
                    ),
                    norm2: LayerNorm::new(b, &format!("{p}.norm2"), d),
                    mlp: Mlp::new(b, &format!("{p}.mlp"), &[d, cfg.mlp_dim, d]),
                    norm3: LayerNorm::new(b, &format!("{p}.norm3"), d),
                    cross_image_to_token: Attention::new(
                        b,
                        &format!("{p}.cross_i2t"),
                        d,
                        cfg.heads,
                        cfg.attention_downsample,
                    ),
                    norm4: LayerNorm::new(b, &format!("{p}.norm4"), d),
                    skip_first_pe: i == 0,
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            mask_token: b.embedding("decoder.mask_token", &[1, d]),
            blocks,
            final_attn: Attention::new(b, "decoder.final_attn", d, cfg.heads, cfg.attention_downsample),
            norm_final: LayerNorm::new(b, "decoder.norm_final", d),
            up1: Upsample2x::new(b, "decoder.up1", d, u1),
            up_norm: LayerNorm::new(b, "decoder.up_norm", u1),
            up2: Upsample2x::new(b, "decoder.up2", u1, u2),
            skip_s8: Linear::new(b, "decoder.skip_s8", d, u1, true),
            skip_s4: Linear::new(b, "decoder.skip_s4", d, u2, true),
            hyper: Mlp::new(b, "decoder.hyper", &[d, d, d, u2]),
        })
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &Attention> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.self_attn, &b.cross_token_to_image, &b.cross_image_to_token])
            .chain(std::iter::once(&self.final_attn))
    }

    pub fn attention_blocks_mut(&mut self) -> impl Iterator<Item = &mut Attention> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.self_attn, &mut b.cross_token_to_image, &mut b.cross_image_to_token])
            .chain(std::iter::once(&mut self.final_attn))
    }

    /// Channels-last skip map projected by `proj`, returned as `[C, H, W]`.
    fn skip<T: Scalar>(ctx: &mut Ctx<T>, proj: &Linear, map: Var) -> Result<Var> {
        let y = proj.forward(ctx, map)?;
        ctx.tape.permute(y, &[2, 0, 1])
    }

    /// Mask logits `[1, H/4, W/4]` of the padded frame.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, neck: &NeckOutput, prompts: &PromptTokens) -> Result<Var> {
        let d = self.cfg.token_dim;
        let [h16, w16, _] = *ctx.tape.shape(neck.s16) else { unreachable!("token maps are [H, W, C]") };

        let mask_token = ctx.p(self.mask_token);
        let tokens = ctx.tape.concat(&[mask_token, prompts.tokens], 0)?;
        let keys = flatten_hw(ctx, neck.s16)?;
        let key_pe: Vec<T> = posenc::encode_grid(h16, w16, d / 4).into_iter().map(T::lit).collect();
        let key_pe = ctx.tape.constant(&[h16 * w16, d], key_pe)?;

        let (mut queries, mut keys) = (tokens, keys);
        for block in &self.blocks {
            (queries, keys) = block.forward(ctx, queries, keys, tokens, key_pe)?;
        }
        let q = ctx.tape.add(queries, tokens)?;
        let k = ctx.tape.add(keys, key_pe)?;
        let a = self.final_attn.forward(ctx, q, k, keys)?;
        let queries = ctx.tape.add(queries, a)?;
        let queries = self.norm_final.forward(ctx, queries)?;

        let src = ctx.tape.reshape(keys, &[h16, w16, d])?;
        let src = ctx.tape.permute(src, &[2, 0, 1])?;
        let up = self.up1.forward(ctx, src)?;
        let s8 = Self::skip(ctx, &self.skip_s8, neck.s8)?;
        let up = ctx.tape.add(up, s8)?;
        let up = self.up_norm.forward_chw(ctx, up)?;
        let up = ctx.tape.gelu(up);
        let up = self.up2.forward(ctx, up)?;
        let s4 = Self::skip(ctx, &self.skip_s4, neck.s4)?;
        let up = ctx.tape.add(up, s4)?;
        let up = ctx.tape.gelu(up);

        let [c, h4, w4] = *ctx.tape.shape(up) else { unreachable!() };
        let token_out = ctx.tape.narrow(queries, 0, 0, 1)?;
        let hyper = self.hyper.forward(ctx, token_out)?;
        let flat = ctx.tape.reshape(up, &[c, h4 * w4])?;
        let logits = ctx.tape.matmul(hyper, flat)?;
        ctx.tape.reshape(logits, &[1, h4, w4])
    }
}
