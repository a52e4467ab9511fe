//! Hierarchical windowed vision transformer producing a four-level pyramid.

use serde::{Deserialize, Serialize};

use super::layers::{Attention, Builder, Conv2d, LayerNorm, Linear, Mlp};
use super::params::Ctx;
use super::posenc;
use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::scalar::Scalar;

/// Total downsampling of the deepest stage; inputs must be a multiple of it.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_stride: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    /// Attention window per stage; 0 means global attention.
    pub window_sizes: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_stride: 4,
            stage_depths: vec![1, 1, 2, 1],
            stage_dims: vec![32, 64, 128, 256],
            window_sizes: vec![8, 8, 4, 0],
            heads: vec![1, 2, 4, 8],
            mlp_ratio: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.patch_stride != 4 {
            return fail(format!("patch_stride must be 4 for strides 4/8/16/32, got {}", self.patch_stride));
        }
        for (name, len) in [
            ("stage_depths", self.stage_depths.len()),
            ("stage_dims", self.stage_dims.len()),
            ("window_sizes", self.window_sizes.len()),
            ("heads", self.heads.len()),
        ] {
            if len != 4 {
                return fail(format!("{name} needs exactly 4 entries, got {len}"));
            }
        }
        if self.stage_dims.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("stage_dims must be strictly increasing: {:?}", self.stage_dims));
        }
        if self.stage_dims[0] % 4 != 0 {
            return fail("stage_dims[0] must be a multiple of 4 for the positional encoding".into());
        }
        for i in 0..4 {
            if self.heads[i] == 0 || self.stage_dims[i] % self.heads[i] != 0 {
                return fail(format!("stage {i}: {} heads do not divide {}", self.heads[i], self.stage_dims[i]));
            }
            if self.stage_depths[i] == 0 {
                return fail(format!("stage {i} has no blocks"));
            }
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn strides(&self) -> [usize; 4] {
        let s = self.patch_stride;
        [s, 2 * s, 4 * s, 8 * s]
    }
}

/// Encoder outputs, channels-last: level `i` is `[H / s_i, W / s_i, C_i]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub maps: [Var; 4],
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
}

/// Largest window that tiles both sides and does not exceed `ws`.
fn effective_window(h: usize, w: usize, ws: usize) -> usize {
    (1..=ws.min(h).min(w)).rev().find(|d| h % d == 0 && w % d == 0).unwrap_or(1)
}

impl EncoderBlock {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [h, w, c] = *ctx.tape.shape(x) else { unreachable!("token maps are [H, W, C]") };
        let normed = self.norm1.forward(ctx, x)?;
        let attended = if self.window == 0 {
            let flat = ctx.tape.reshape(normed, &[1, h * w, c])?;
            let a = self.attn.forward(ctx, flat, flat, flat)?;
            ctx.tape.reshape(a, &[h, w, c])?
        } else {
            let ws = effective_window(h, w, self.window);
            let win = ctx.tape.window_partition(normed, ws)?;
            let a = self.attn.forward(ctx, win, win, win)?;
            ctx.tape.window_unpartition(a, ws, h, w)?
        };
        let x = ctx.tape.add(x, attended)?;
        let normed = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, normed)?;
        ctx.tape.add(x, m)
    }
}

/// Space-to-depth by 2, then a linear projection to the next width.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [h, w, c] = *ctx.tape.shape(x) else { unreachable!("token maps are [H, W, C]") };
        let x = ctx.tape.reshape(x, &[h / 2, 2, w / 2, 2 * c])?;
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        let x = ctx.tape.reshape(x, &[h / 2, w / 2, 4 * c])?;
        let x = self.norm.forward(ctx, x)?;
        self.reduce.forward(ctx, x)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<EncoderBlock>,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Conv2d,
    pub stages: Vec<Stage>,
}

impl ImageEncoder {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = &cfg.stage_dims;
        let patch_embed = Conv2d::new(b, "encoder.patch_embed", 3, dims[0], 7, cfg.patch_stride, 3);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let d = dims[i];
            let merge = (i > 0).then(|| PatchMerge {
                norm: LayerNorm::new(b, &format!("encoder.stage{i}.merge.norm"), 4 * dims[i - 1]),
                reduce: Linear::new(b, &format!("encoder.stage{i}.merge.reduce"), 4 * dims[i - 1], d, false),
            });
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| {
                    let p = format!("encoder.stage{i}.block{j}");
                    EncoderBlock {
                        norm1: LayerNorm::new(b, &format!("{p}.norm1"), d),
                        attn: Attention::new(b, &format!("{p}.attn"), d, cfg.heads[i], 1),
                        norm2: LayerNorm::new(b, &format!("{p}.norm2"), d),
                        mlp: Mlp::new(b, &format!("{p}.mlp"), &[d, cfg.mlp_ratio * d, d]),
                        window: cfg.window_sizes[i],
                    }
                })
                .collect();
            stages.push(Stage { merge, blocks });
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            stages,
        })
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &Attention> {
        self.stages.iter().flat_map(|s| s.blocks.iter().map(|b| &b.attn))
    }

    pub fn attention_blocks_mut(&mut self) -> impl Iterator<Item = &mut Attention> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut().map(|b| &mut b.attn))
    }

    /// `image [3, H, W]` with `H` and `W` multiples of 32.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, image: Var) -> Result<FeaturePyramid> {
        let shape = ctx.tape.shape(image).to_vec();
        let [3, h, w] = shape[..] else {
            return Err(Error::invalid("encode_image", format!("expected [3, H, W], got {shape:?}")));
        };
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::IndivisibleInput {
                height: h,
                width: w,
                multiple: INPUT_MULTIPLE,
            });
        }
        let x = self.patch_embed.forward(ctx, image)?;
        let mut x = ctx.tape.permute(x, &[1, 2, 0])?;
        let [gh, gw, c] = *ctx.tape.shape(x) else { unreachable!() };
        let pe: Vec<T> = posenc::encode_grid(gh, gw, c / 4).into_iter().map(T::lit).collect();
        let pe = ctx.tape.constant(&[gh, gw, c], pe)?;
        x = ctx.tape.add(x, pe)?;

        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(ctx, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(ctx, x)?;
            }
            maps.push(x);
        }
        Ok(FeaturePyramid {
            maps: [maps[0], maps[1], maps[2], maps[3]],
        })
    }
}
