//! The assembled promptable segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{DecoderConfig, MaskDecoder, Neck};
use super::encoder::{EncoderConfig, FeaturePyramid, ImageEncoder, INPUT_MULTIPLE};
use super::layers::{Attention, Builder};
use super::params::{Ctx, ParamSet};
use super::prompt::{PromptEncoder, PromptSet};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Seed of the random base weights.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            init_seed: 0,
        }
    }
}

/// Where an attention module lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
}

/// Layer structure, independent of the element type of the weights.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder,
    pub neck: Neck,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

impl Network {
    pub fn attention_blocks(&self) -> impl Iterator<Item = (Part, &Attention)> {
        self.encoder
            .attention_blocks()
            .map(|a| (Part::Encoder, a))
            .chain(self.decoder.attention_blocks().map(|a| (Part::Decoder, a)))
    }

    pub fn attention_blocks_mut(&mut self) -> impl Iterator<Item = (Part, &mut Attention)> {
        self.encoder
            .attention_blocks_mut()
            .map(|a| (Part::Encoder, a))
            .chain(self.decoder.attention_blocks_mut().map(|a| (Part::Decoder, a)))
    }
}

#[derive(Debug, Clone)]
pub struct SegModel<T> {
    pub net: Network,
    pub params: ParamSet<T>,
}

/// Smallest multiple of 32 not below `n`.
pub fn padded_len(n: usize) -> usize {
    n.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE
}

impl<T: Scalar> SegModel<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.decoder.token_dim < 4 {
            return Err(Error::Config("decoder token_dim too small".into()));
        }
        let mut params = ParamSet::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
        };
        let encoder = ImageEncoder::new(&mut b, &cfg.encoder)?;
        let neck = Neck::new(&mut b, &cfg.encoder.stage_dims, cfg.decoder.token_dim);
        let prompt = PromptEncoder::new(&mut b, cfg.decoder.token_dim);
        let decoder = MaskDecoder::new(&mut b, &cfg.decoder)?;
        Ok(Self {
            net: Network {
                cfg: cfg.clone(),
                encoder,
                neck,
                prompt,
                decoder,
            },
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Same network with weights converted to another precision.
    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode_image(&self, ctx: &mut Ctx<T>, image: Var) -> Result<FeaturePyramid> {
        self.net.encoder.forward(ctx, image)
    }

    /// Full forward pass: `image [3, H, W]` to logits `[1, H, W]`.
    ///
    /// Sides that are not multiples of 32 are zero-padded at the bottom and
    /// right, and the logits are cropped back.
    pub fn forward(&self, ctx: &mut Ctx<T>, image: Var, prompts: &PromptSet) -> Result<Var> {
        let shape = ctx.tape.shape(image).to_vec();
        let [3, h, w] = shape[..] else {
            return Err(Error::invalid("forward", format!("expected image [3, H, W], got {shape:?}")));
        };
        prompts.validate(h, w)?;
        let (ph, pw) = (padded_len(h), padded_len(w));
        let mut x = image;
        if pw > w {
            let z = ctx.tape.constant(&[3, h, pw - w], vec![T::zero(); 3 * h * (pw - w)])?;
            x = ctx.tape.concat(&[x, z], 2)?;
        }
        if ph > h {
            let z = ctx.tape.constant(&[3, ph - h, pw], vec![T::zero(); 3 * (ph - h) * pw])?;
            x = ctx.tape.concat(&[x, z], 1)?;
        }
        let features = self.net.encoder.forward(ctx, x)?;
        let neck = self.net.neck.forward(ctx, &features)?;
        let tokens = self.net.prompt.forward(ctx, prompts, (h, w), (ph, pw))?;
        let low = self.net.decoder.forward(ctx, &neck, &tokens)?;
        let mut logits = ctx.tape.resize_bilinear(low, ph, pw)?;
        if ph > h {
            logits = ctx.tape.narrow(logits, 1, 0, h)?;
        }
        if pw > w {
            logits = ctx.tape.narrow(logits, 2, 0, w)?;
        }
        Ok(logits)
    }

    /// Inference on a plain tensor; returns logits `[1, H, W]`.
    pub fn predict(&self, image: &Tensor<T>, prompts: &PromptSet) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(&self.params);
        let x = ctx.tape.constant(image.shape(), image.data().to_vec())?;
        let y = self.forward(&mut ctx, x, prompts)?;
        Ok(ctx.tape.tensor(y))
    }

    /// Number of weights excluding adapters.
    pub fn base_param_count(&self) -> usize {
        self.params.count_where(|p| !p.kind.is_adapter())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.count_where(|p| p.tensor.requires_grad())
    }

    pub fn freeze_all(&mut self) {
        self.params
            .iter_mut()
            .for_each(|(_, p)| p.tensor.set_requires_grad(false));
    }
}
