pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod pretrain;
pub mod scalar;
pub mod train;

pub use backbone::{ModelConfig, PromptSet, SegModel};
pub use error::{Error, Result};
pub use lora::LoraConfig;
pub use numerics::{Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SegModel32 = SegModel<f32>;
pub type SegModel64 = SegModel<f64>;
