//! The resolved run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use seglora::backbone::ModelConfig;
use seglora::data::{AugmentConfig, SynthConfig};
use seglora::eval::{GridConfig, PromptMode};
use seglora::losses::{CompositeWeights, TverskyParams};
use seglora::optim::TrainConfig;
use seglora::pretrain::PretrainConfig;
use seglora::train::TrainSetup;
use seglora::LoraConfig;

/// Variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "SEGLORA_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
/// Side of the images at full scale (the largest multiple of 32 near 1000).
pub const PAPER_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub loss: CompositeWeights,
    pub tversky: TverskyParams,
    pub augment: AugmentConfig,
    /// Whether training applies `augment`.
    pub use_augment: bool,
    /// Prompt modes sampled while training.
    pub train_prompt_modes: Vec<PromptMode>,
    pub grid: GridConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Full checkpoint of the pretrained base.
    pub base: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let setup = TrainSetup::default();
        Self {
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            lora: LoraConfig::default(),
            train: setup.train,
            loss: setup.weights,
            tversky: setup.tversky,
            augment: setup.augment.unwrap_or_default(),
            use_augment: true,
            train_prompt_modes: setup.prompt_modes,
            grid: GridConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))
    }

    /// Swaps in the full-scale step count, batch size and image side.
    pub fn paper_scale(&mut self) {
        self.train = TrainConfig {
            seed: self.train.seed,
            ..TrainConfig::paper_scale()
        };
        self.synth.size = PAPER_SIZE;
    }

    /// Compressed schedule for desk runs; see `TrainSetup::desk`.
    pub fn desk(&mut self, steps: usize) {
        let d = TrainSetup::desk(steps);
        self.train = TrainConfig {
            seed: self.train.seed,
            ..d.train
        };
        self.use_augment = d.augment.is_some();
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            weights: self.loss,
            tversky: self.tversky,
            augment: self.use_augment.then(|| self.augment.clone()),
            prompt_modes: self.train_prompt_modes.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.synth.validate()?;
        self.lora.validate()?;
        self.setup().validate()?;
        Ok(())
    }

    pub fn out_root(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ROOT_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
        })
    }
}
