//! The fine-tuning loop: per-sample tapes, gradient accumulation over the
//! batch, clipping and AdamW on the trainable parameters only.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Ctx, PromptSet, SegModel};
use crate::data::{augment, derive_seed, AugmentConfig, SegSample};
use crate::error::{Error, Result};
use crate::eval::{sample_prompts, PromptMode};
use crate::losses::{composite_loss, CompositeWeights, LossBreakdown, TverskyParams};
use crate::numerics::Tensor;
use crate::optim::{clip_grad_norm, lr_at, AdamState, AdamW, TrainConfig};
use crate::scalar::Scalar;

/// Everything that shapes a training run besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub weights: CompositeWeights,
    pub tversky: TverskyParams,
    /// `None` trains on the samples as given.
    pub augment: Option<AugmentConfig>,
    /// Each training sample is prompted with a mode drawn from this list.
    pub prompt_modes: Vec<PromptMode>,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            weights: CompositeWeights::default(),
            tversky: TverskyParams::default(),
            augment: Some(AugmentConfig::default()),
            prompt_modes: PromptMode::ALL.to_vec(),
        }
    }
}

impl TrainSetup {
    /// Compressed schedule for short desk runs: learning rate 1e-3, a
    /// warm-up of 5% and a single cosine cycle to the end, batch 1 and no
    /// augmentation.
    pub fn desk(total_steps: usize) -> Self {
        let warmup = (total_steps / 20).max(1);
        Self {
            train: TrainConfig {
                lr: 1e-3,
                warmup_steps: warmup,
                total_steps,
                restart_period: total_steps.saturating_sub(warmup).max(1),
                batch_size: 1,
                ..TrainConfig::default()
            },
            augment: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.weights.validate()?;
        self.tversky.validate()?;
        if self.prompt_modes.is_empty() {
            return Err(Error::Config("train: prompt_modes must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// CSV header of the per-step log.
pub const STEP_LOG_HEADER: &str = "step,lr,total,bce,dice,ftl";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{:e},{},{},{},{}", self.step, self.lr, l.total, l.bce, l.dice, l.ftl)
    }
}

/// One training example after augmentation and prompting.
pub struct Prepared<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
    pub prompts: PromptSet,
}

/// Draws sample `slot` of a step: which item, its augmentation and its
/// prompts all follow from `(seed, slot)` alone.
pub fn prepare<T: Scalar>(data: &[SegSample], setup: &TrainSetup, slot: u64) -> Result<Prepared<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.train.seed, slot));
    let item = &data[rng.random_range(0..data.len())];
    let aug_seed = rng.next_u64();
    let sample = match &setup.augment {
        Some(cfg) => augment(item, cfg, aug_seed),
        None => item.clone(),
    };
    let mut mode = setup.prompt_modes[rng.random_range(0..setup.prompt_modes.len())];
    if mode.needs_foreground() && sample.foreground_fraction() == 0.0 {
        mode = PromptMode::Eval0;
    }
    let prompts = sample_prompts(&sample.mask, mode, rng.next_u64())?;
    Ok(Prepared {
        image: sample.image.cast(),
        mask: sample.mask.cast(),
        prompts,
    })
}

/// Forward, loss and backward for one example. Gradients of the trainable
/// parameters are added into `acc`, scaled by `weight`.
fn accumulate_example<T: Scalar>(
    model: &SegModel<T>,
    ex: &Prepared<T>,
    setup: &TrainSetup,
    weight: f64,
    acc: &mut [Vec<T>],
    index: &[usize],
) -> Result<LossBreakdown> {
    let mut ctx = Ctx::new(&model.params);
    let image = ctx.tape.constant(ex.image.shape(), ex.image.data().to_vec())?;
    let logits = model.forward(&mut ctx, image, &ex.prompts)?;
    let probs = ctx.tape.sigmoid(logits);
    let shape = ctx.tape.shape(logits).to_vec();
    let target = ctx.tape.constant(&shape, ex.mask.data().to_vec())?;
    let (total, parts) = composite_loss(&mut ctx.tape, probs, target, &setup.weights, &setup.tversky)?;
    let total = ctx.tape.scale(total, T::lit(weight));
    ctx.tape.backward(total)?;
    for (id, g) in ctx.take_grads() {
        if let Some(&slot) = index.get(id.index()).filter(|&&s| s != usize::MAX) {
            acc[slot].iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
        }
    }
    Ok(parts)
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub trainable_fraction: f64,
}

/// Trains the parameters of `model` that require gradients.
///
/// Batches are split into independent per-sample tapes whose gradients are
/// summed in slot order, so results do not depend on scheduling. A
/// non-finite loss or gradient aborts the run before the update of that
/// step, leaving `model` at the last good state. Each step record is passed
/// to `on_step`, and also written to `log` as CSV when given.
pub fn train<T: Scalar>(
    model: &mut SegModel<T>,
    data: &[SegSample],
    setup: &TrainSetup,
    mut log: Option<&mut dyn Write>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    setup.validate()?;
    if data.is_empty() {
        return Err(Error::Config("train: no training samples".into()));
    }
    let trainable = model.params.trainable_ids();
    if trainable.is_empty() {
        return Err(Error::Config("train: model has no trainable parameters".into()));
    }
    let mut index = vec![usize::MAX; trainable.iter().map(|id| id.index() + 1).max().unwrap_or(0)];
    for (slot, id) in trainable.iter().enumerate() {
        index[id.index()] = slot;
    }
    let cfg = &setup.train;
    let opt = AdamW::from_config(cfg);
    let mut state = AdamState::<T>::new();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{STEP_LOG_HEADER}")?;
    }
    let mut steps = Vec::with_capacity(cfg.total_steps);
    let inv_batch = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.total_steps {
        let mut acc: Vec<Vec<T>> = trainable
            .iter()
            .map(|&id| vec![T::zero(); model.params.tensor(id).numel()])
            .collect();
        let mut loss = LossBreakdown {
            total: 0.0,
            bce: 0.0,
            dice: 0.0,
            ftl: 0.0,
        };
        for b in 0..cfg.batch_size {
            let slot = (step * cfg.batch_size + b) as u64;
            let ex = prepare::<T>(data, setup, slot)?;
            let parts = accumulate_example(model, &ex, setup, inv_batch, &mut acc, &index)?;
            loss.total += parts.total * inv_batch;
            loss.bce += parts.bce * inv_batch;
            loss.dice += parts.dice * inv_batch;
            loss.ftl += parts.ftl * inv_batch;
        }
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        model.params.zero_grad();
        for (&id, g) in trainable.iter().zip(&acc) {
            model.params.tensor_mut(id).accumulate_grad(g)?;
        }
        let grad_norm = clip_grad_norm(&mut model.params, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        opt.step(&mut model.params, &mut state, lr, step)?;
        let record = StepRecord {
            step,
            lr,
            loss,
            grad_norm,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", record.csv_row())?;
        }
        on_step(&record);
        steps.push(record);
    }
    model.params.zero_grad();
    Ok(TrainReport {
        steps,
        trainable_fraction: crate::lora::trainable_fraction(model),
    })
}
