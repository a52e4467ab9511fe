//! Promptable segmentation network: hierarchical image encoder, prompt
//! encoder and two-way attention mask decoder.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod model;
pub mod params;
pub mod posenc;
pub mod prompt;

pub use decoder::{DecoderConfig, MaskDecoder, Neck, NeckOutput};
pub use encoder::{EncoderConfig, FeaturePyramid, ImageEncoder, INPUT_MULTIPLE};
pub use layers::{Attention, Linear};
pub use model::{padded_len, ModelConfig, Network, Part, SegModel};
pub use params::{Ctx, Param, ParamId, ParamKind, ParamSet};
pub use prompt::{PromptEncoder, PromptSet, PromptTokens};
