//! Full-parameter pretraining of the base network on generic shape scenes,
//! standing in for a foundation model's pretrained weights. Adapters are
//! then fine-tuned on top of the frozen result.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, SegModel};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::{generate_dataset, SynthConfig, Task};
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::scalar::Scalar;
use crate::train::{train, StepRecord, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub size: usize,
    pub corpus_size: usize,
    /// Narrowest stroke in the corpus, in pixels.
    pub min_width_px: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            size: 128,
            corpus_size: 64,
            min_width_px: 4.0,
            steps: 2000,
            warmup_steps: 100,
            lr: 1e-3,
            batch_size: 1,
            seed: 11,
        }
    }
}

impl PretrainConfig {
    pub fn corpus(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            size: self.size,
            task: Task::Shapes,
            min_width_px: self.min_width_px,
            ..SynthConfig::default()
        }
    }

    /// One cosine cycle after the warm-up, no augmentation, every prompt mode.
    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                lr: self.lr,
                warmup_steps: self.warmup_steps,
                total_steps: self.steps,
                restart_period: self.steps.saturating_sub(self.warmup_steps).max(1),
                batch_size: self.batch_size,
                seed: self.seed.wrapping_add(1),
                ..TrainConfig::default()
            },
            augment: None,
            ..TrainSetup::default()
        }
    }
}

/// Trains every weight of a freshly initialised network on the shapes
/// corpus and returns it frozen.
pub fn pretrain<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<SegModel<T>> {
    if cfg.corpus_size == 0 {
        return Err(Error::Config("pretrain: corpus_size must be positive".into()));
    }
    let corpus = generate_dataset(&cfg.corpus(), cfg.corpus_size)?;
    let mut model = SegModel::<T>::new(model_cfg)?;
    model
        .params
        .iter_mut()
        .for_each(|(_, p)| p.tensor.set_requires_grad(true));
    train(&mut model, &corpus, &cfg.setup(), None, on_step)?;
    model.freeze_all();
    Ok(model)
}

/// Loads the base from `path` when present; otherwise pretrains it and
/// writes it there. Pretraining is deterministic, so the file is a cache.
pub fn pretrained_base(model_cfg: &ModelConfig, cfg: &PretrainConfig, path: &Path) -> Result<SegModel<f32>> {
    if path.is_file() {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.meta.model == *model_cfg && ckpt.meta.pretrain.as_ref() == Some(cfg) {
            let mut model = ckpt.restore::<f32>()?;
            model.freeze_all();
            return Ok(model);
        }
        log::warn!("{}: cached base was built with another config, rebuilding", path.display());
    }
    let model = pretrain::<f32>(model_cfg, cfg, |r| {
        if r.step % 250 == 0 {
            log::info!("pretrain step {} loss {:.4}", r.step, r.loss.total);
        }
    })?;
    let mut ckpt = Checkpoint::from_model(&model, CheckpointKind::Full, None);
    ckpt.meta.pretrain = Some(cfg.clone());
    ckpt.save::<f32>(path)?;
    Ok(model)
}
