//! The rank x ablation x prompt-mode evaluation grid.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{auc_score, dice_score};
use super::overlay::save_overlay;
use super::prompts::{sample_prompts, PromptMode};
use crate::backbone::{ModelConfig, SegModel};
use crate::checkpoint::{base_digest, Checkpoint, CheckpointKind};
use crate::data::{derive_seed, SegSample, Task};
use crate::error::{Error, Result};
use crate::lora::{inject, LoraConfig};
use crate::losses::CompositeWeights;
use crate::numerics::Tensor;
use crate::train::{train, TrainSetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AblationMode {
    /// Composite loss, adapters in encoder and decoder.
    Abl0,
    /// BCE only.
    Abl1,
    /// Focal Tversky only.
    Abl2,
    /// Soft Dice only.
    Abl3,
    /// Adapters in the encoder only.
    Abl4,
    /// Adapters in the decoder only.
    Abl5,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Abl0,
        AblationMode::Abl1,
        AblationMode::Abl2,
        AblationMode::Abl3,
        AblationMode::Abl4,
        AblationMode::Abl5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn weights(self) -> CompositeWeights {
        match self {
            AblationMode::Abl1 => CompositeWeights::new(1.0, 0.0, 0.0),
            AblationMode::Abl2 => CompositeWeights::new(0.0, 0.0, 1.0),
            AblationMode::Abl3 => CompositeWeights::new(0.0, 1.0, 0.0),
            _ => CompositeWeights::default(),
        }
    }

    /// `(encoder, decoder)` adapter placement.
    pub fn placement(self) -> (bool, bool) {
        match self {
            AblationMode::Abl4 => (true, false),
            AblationMode::Abl5 => (false, true),
            _ => (true, true),
        }
    }

    /// Adapter config for this mode derived from `base`.
    pub fn lora(self, base: &LoraConfig) -> LoraConfig {
        let (enc, dec) = self.placement();
        LoraConfig {
            apply_to_encoder: enc,
            apply_to_decoder: dec,
            ..base.clone()
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "abl-{}", self.index())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("abl-")
            .and_then(|d| d.parse::<usize>().ok())
            .and_then(|i| AblationMode::ALL.get(i).copied())
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected abl-0 .. abl-5)")))
    }
}

impl From<AblationMode> for String {
    fn from(m: AblationMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for AblationMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// What to do when a cell's checkpoint is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Train every cell; checkpoints are written when a directory is set.
    Train,
    /// Load existing checkpoints, train the rest.
    TrainMissing,
    /// Load only; a missing checkpoint is an error.
    EvalOnly,
}

/// A labelled train/test pair.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub ranks: Vec<usize>,
    pub ablations: Vec<AblationMode>,
    pub prompt_modes: Vec<PromptMode>,
    pub seed: u64,
    /// Worker threads over grid cells; results do not depend on it.
    pub workers: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ranks: crate::lora::RANKS.to_vec(),
            ablations: AblationMode::ALL.to_vec(),
            prompt_modes: PromptMode::ALL.to_vec(),
            seed: 0,
            workers: 1,
        }
    }
}

/// Everything needed to run a grid besides the data.
#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Frozen base network; every cell starts from a copy.
    pub base: SegModel<f32>,
    pub lora: LoraConfig,
    pub setup: TrainSetup,
    pub grid: GridConfig,
    pub policy: CheckpointPolicy,
    pub checkpoint_dir: Option<PathBuf>,
    pub overlay_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub task: Task,
    pub rank: usize,
    pub ablation: AblationMode,
    pub prompt_mode: PromptMode,
    pub n_samples: usize,
    pub n_excluded: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// NaN when no sample had both classes.
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Samples whose AUC was undefined (single-class target).
    pub auc_undefined: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Per evaluated sample, in dataset order.
    pub dice: Vec<f64>,
}

pub const REPORT_HEADER: [&str; 14] = [
    "dataset",
    "task",
    "rank",
    "ablation",
    "prompt_mode",
    "n_samples",
    "n_excluded",
    "dice_mean",
    "dice_std",
    "auc_mean",
    "auc_std",
    "seed",
    "config_hash",
    "auc_undefined",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.dataset.clone(),
                r.task.to_string(),
                r.rank.to_string(),
                r.ablation.to_string(),
                r.prompt_mode.to_string(),
                r.n_samples.to_string(),
                r.n_excluded.to_string(),
                format!("{:.6}", r.dice_mean),
                format!("{:.6}", r.dice_std),
                format!("{:.6}", r.auc_mean),
                format!("{:.6}", r.auc_std),
                r.seed.to_string(),
                r.config_hash.clone(),
                r.auc_undefined.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        self.write_csv(fs::File::create(path)?)
    }

    /// Per-sample Dice of one cell, for paired tests across cells.
    pub fn dice_of(&self, dataset: &str, rank: usize, ablation: AblationMode, mode: PromptMode) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.rank == rank && r.ablation == ablation && r.prompt_mode == mode)
            .map(|r| r.dice.as_slice())
    }
}

/// Mean and population standard deviation; NaN for an empty list.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Short SHA-256 of the canonical text of a cell's configuration.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let text = toml::to_string(value)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct CellIdentity<'a> {
    dataset: &'a str,
    task: Task,
    n_train: usize,
    model: &'a ModelConfig,
    base_digest: &'a str,
    lora: &'a LoraConfig,
    setup: &'a TrainSetup,
    seed: u64,
}

pub fn checkpoint_path(dir: &Path, dataset: &str, rank: usize, ablation: AblationMode) -> PathBuf {
    dir.join(dataset).join(format!("r{rank}_{ablation}.sl2l"))
}

/// Trained model of one cell, loaded or trained per `policy`.
pub fn cell_model(spec: &GridSpec, data: &Dataset, rank: usize, ablation: AblationMode) -> Result<SegModel<f32>> {
    let lora = ablation.lora(&LoraConfig {
        rank,
        ..spec.lora.clone()
    });
    let path = spec
        .checkpoint_dir
        .as_ref()
        .map(|d| checkpoint_path(d, &data.name, rank, ablation));
    if let Some(p) = path.as_ref().filter(|_| spec.policy != CheckpointPolicy::Train) {
        if p.is_file() {
            return Checkpoint::load(p)?.restore_onto(spec.base.clone());
        }
        if spec.policy == CheckpointPolicy::EvalOnly {
            return Err(Error::MissingCheckpoint(p.clone()));
        }
    }
    let mut model = spec.base.clone();
    inject(&mut model, &lora)?;
    let setup = TrainSetup {
        weights: ablation.weights(),
        ..spec.setup.clone()
    };
    let report = train(&mut model, &data.train, &setup, None, |_| {})?;
    log::info!(
        "{} rank {rank} {ablation}: trained {} steps, final loss {:.4}",
        data.name,
        report.steps.len(),
        report.steps.last().map_or(f64::NAN, |s| s.loss.total)
    );
    if let Some(p) = path {
        let mut ckpt = Checkpoint::from_model(&model, CheckpointKind::Adapter, Some(lora));
        ckpt.meta.note = ablation.to_string();
        ckpt.save::<f32>(&p)?;
    }
    Ok(model)
}

fn sigmoid(logits: &Tensor<f32>, shape: &[usize]) -> Result<Tensor<f32>> {
    Tensor::new(shape, logits.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect())
}

/// Evaluates one trained model over the prompt modes of the grid.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cell(
    model: &SegModel<f32>,
    data: &Dataset,
    rank: usize,
    ablation: AblationMode,
    modes: &[PromptMode],
    seed: u64,
    config_hash: &str,
    overlay_dir: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (mut dice, mut auc) = (Vec::new(), Vec::new());
        let (mut excluded, mut auc_undefined) = (0, 0);
        for (i, s) in data.test.iter().enumerate() {
            // Prompts depend on the sample and mode only, so every cell sees
            // the same prompts.
            let prompt_seed = derive_seed(seed ^ ((mode.index() as u64 + 1) << 56), i as u64);
            let prompts = match sample_prompts(&s.mask, mode, prompt_seed) {
                Ok(p) => p,
                Err(Error::EmptyMask(_)) => {
                    excluded += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let probs = sigmoid(&model.predict(&s.image, &prompts)?, s.mask.shape())?;
            dice.push(dice_score(&probs, &s.mask, 0.5)?);
            match auc_score(&probs, &s.mask) {
                Ok(a) => auc.push(a),
                Err(Error::AucUndefined) => auc_undefined += 1,
                Err(e) => return Err(e),
            }
            if let Some(dir) = overlay_dir {
                fs::create_dir_all(dir)?;
                let name = format!("{}_r{rank}_{ablation}_{mode}_{i:04}.png", data.name);
                save_overlay(&dir.join(name), &s.image, &s.mask, &probs)?;
            }
        }
        let (dice_mean, dice_std) = mean_std(&dice);
        let (auc_mean, auc_std) = mean_std(&auc);
        rows.push(ReportRow {
            dataset: data.name.clone(),
            task: data.task,
            rank,
            ablation,
            prompt_mode: mode,
            n_samples: dice.len(),
            n_excluded: excluded,
            dice_mean,
            dice_std,
            auc_mean,
            auc_std,
            auc_undefined,
            seed,
            config_hash: config_hash.to_owned(),
            dice,
        });
    }
    Ok(rows)
}

fn run_cell(
    spec: &GridSpec,
    base_digest: &str,
    data: &Dataset,
    rank: usize,
    ablation: AblationMode,
) -> Result<Vec<ReportRow>> {
    let lora = ablation.lora(&LoraConfig {
        rank,
        ..spec.lora.clone()
    });
    let setup = TrainSetup {
        weights: ablation.weights(),
        ..spec.setup.clone()
    };
    let hash = config_hash(&CellIdentity {
        dataset: &data.name,
        task: data.task,
        n_train: data.train.len(),
        model: spec.base.config(),
        base_digest,
        lora: &lora,
        setup: &setup,
        seed: spec.grid.seed,
    })?;
    let model = cell_model(spec, data, rank, ablation)?;
    evaluate_cell(
        &model,
        data,
        rank,
        ablation,
        &spec.grid.prompt_modes,
        spec.grid.seed,
        &hash,
        spec.overlay_dir.as_deref(),
    )
}

/// Trains (or loads) one model per `(dataset, rank, ablation)` and evaluates
/// it under every prompt mode. Rows come out in dataset, rank, ablation,
/// mode order whatever the worker count.
pub fn run_grid(spec: &GridSpec, datasets: &[Dataset]) -> Result<EvalReport> {
    if spec.grid.ranks.is_empty() || spec.grid.ablations.is_empty() || spec.grid.prompt_modes.is_empty() {
        return Err(Error::Config("grid: ranks, ablations and prompt modes must be non-empty".into()));
    }
    spec.setup.validate()?;
    for &rank in &spec.grid.ranks {
        LoraConfig {
            rank,
            ..spec.lora.clone()
        }
        .validate()?;
    }
    let digest = base_digest(&spec.base);
    let cells: Vec<(&Dataset, usize, AblationMode)> = datasets
        .iter()
        .flat_map(|d| {
            spec.grid
                .ranks
                .iter()
                .flat_map(move |&r| spec.grid.ablations.iter().map(move |&a| (d, r, a)))
        })
        .collect();
    let workers = spec.grid.workers.clamp(1, cells.len().max(1));
    let mut results: Vec<Option<Result<Vec<ReportRow>>>> = (0..cells.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, &(d, r, a)) in results.iter_mut().zip(&cells) {
            *slot = Some(run_cell(spec, &digest, d, r, a));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(&(d, r, a)) = cells.get(i) else { break };
                    let res = run_cell(spec, &digest, d, r, a);
                    done.lock().expect("worker panicked")[i] = Some(res);
                });
            }
        });
    }
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r.expect("every cell ran")?);
    }
    Ok(EvalReport { rows })
}
