//! `seglora`: synthetic data, base pretraining, adapter training,
//! evaluation sweeps and merging.

mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use seglora::backbone::SegModel;
use seglora::checkpoint::{Checkpoint, CheckpointKind};
use seglora::data::{generate_dataset, load_dataset, write_pairs, SegSample, Split, Task};
use seglora::eval::{
    config_hash, evaluate_cell, run_grid, AblationMode, CheckpointPolicy, Dataset, GridSpec, PromptMode,
};
use seglora::lora::{inject, merge_all, trainable_fraction, LoraConfig};
use seglora::pretrain::pretrain;
use seglora::train::train;

use config::{RunConfig, OUT_ROOT_VAR};

#[derive(Parser)]
#[command(name = "seglora", version, about = "Low-rank adapter fine-tuning of a promptable segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image/mask pairs.
    Generate(GenerateArgs),
    /// Pretrain the base network on generic shape scenes.
    Pretrain(PretrainArgs),
    /// Fine-tune adapters on a dataset.
    Train(TrainArgs),
    /// Evaluate one adapter checkpoint under the prompt modes.
    Eval(EvalArgs),
    /// Train or load a rank x ablation grid and evaluate every prompt mode.
    Sweep(SweepArgs),
    /// Fold adapters into the base weights.
    Merge(MergeArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root for default paths.
    #[arg(long, env = OUT_ROOT_VAR)]
    out_root: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(root) = &self.out_root {
            cfg.paths.out = Some(root.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    /// Target directory; defaults to `<root>/data/<task>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Defaults to `<root>/base.sl2l`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Dataset directory (pool or train/test layout).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Full checkpoint of the pretrained base; without it the randomly
    /// initialised network is the base.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Full-scale schedule, batch size and image side.
    #[arg(long)]
    paper_scale: bool,
    /// Compressed desk schedule over this many steps.
    #[arg(long, value_name = "STEPS", conflicts_with = "paper_scale")]
    desk: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value = "abl-0")]
    ablation: AblationMode,
    /// Run directory; defaults to `<root>/train-<task>-r<rank>-<ablation>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated prompt modes; all seven by default.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<PromptMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV; defaults to `report.csv` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one overlay PNG per evaluated sample next to the report.
    #[arg(long)]
    dump_overlays: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    ablations: Vec<AblationMode>,
    #[arg(long, value_delimiter = ',')]
    modes: Vec<PromptMode>,
    /// Parallel grid cells; the report does not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Checkpoint directory; defaults to `<root>/checkpoints`.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Train cells whose checkpoint is missing instead of failing.
    #[arg(long)]
    train_missing: bool,
    /// Report CSV; defaults to `<root>/sweep-<task>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dump_overlays: bool,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Merge(a) => cmd_merge(a),
    }
}

fn ensure_empty(dir: &Path, force: bool) -> Result<()> {
    if dir.is_dir() && fs::read_dir(dir)?.next().is_some() && !force {
        bail!("{} is not empty (use --force to write into it)", dir.display());
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    cfg.synth.task = a.task;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(s) = a.size {
        cfg.synth.size = s;
    }
    if a.n == 0 {
        bail!("--n must be positive");
    }
    let out = a.out.unwrap_or_else(|| cfg.out_root().join("data").join(a.task.to_string()));
    ensure_empty(&out, a.force)?;
    let samples = generate_dataset(&cfg.synth, a.n)?;
    write_pairs(&out, &samples)?;
    cfg.paths.data = Some(out.clone());
    cfg.save(&out.join("config.toml"))?;
    println!("wrote {} {} pairs to {}", samples.len(), a.task, out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    if let Some(s) = a.size {
        cfg.pretrain.size = s;
    }
    let out = a.out.unwrap_or_else(|| cfg.out_root().join("base.sl2l"));
    let model = pretrain::<f32>(&cfg.model, &cfg.pretrain, |r| {
        if r.step % 100 == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", r.step, r.lr, r.loss.total);
        }
    })?;
    let mut ckpt = Checkpoint::from_model(&model, CheckpointKind::Full, None);
    ckpt.meta.pretrain = Some(cfg.pretrain.clone());
    ckpt.save::<f32>(&out)?;
    println!("wrote base {}", out.display());
    Ok(())
}

/// Applies the shared model/data flags; returns the data dir and task.
fn apply_model_args(cfg: &mut RunConfig, m: &ModelArgs) -> Result<(PathBuf, Task)> {
    if m.paper_scale {
        cfg.paper_scale();
    }
    if let Some(steps) = m.desk {
        cfg.desk(steps);
    }
    if let Some(s) = m.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = m.seed {
        cfg.train.seed = s;
        cfg.grid.seed = s;
    }
    if let Some(b) = &m.base {
        cfg.paths.base = Some(b.clone());
    }
    if let Some(d) = &m.data {
        cfg.paths.data = Some(d.clone());
    }
    let task = m.task.unwrap_or(cfg.synth.task);
    let data = cfg.paths.data.clone().context("no dataset: pass --data or set paths.data")?;
    Ok((data, task))
}

fn load_base(cfg: &RunConfig) -> Result<SegModel<f32>> {
    let mut model = match &cfg.paths.base {
        Some(p) => Checkpoint::load(p)?
            .restore::<f32>()
            .with_context(|| format!("loading base {}", p.display()))?,
        None => {
            log::warn!("no base checkpoint given; adapters train on the randomly initialised network");
            SegModel::new(&cfg.model)?
        }
    };
    model.freeze_all();
    Ok(model)
}

fn load_split(dir: &Path, split: Split, task: Task) -> Result<Vec<SegSample>> {
    let loaded = load_dataset(dir, split, task).with_context(|| format!("loading {}", dir.display()))?;
    if !loaded.skipped.is_empty() {
        log::warn!("{} images without masks skipped", loaded.skipped.len());
    }
    if let Some(seed) = loaded.split_seed {
        log::info!("no split file, random 75/25 split with seed {seed}");
    }
    if loaded.samples.is_empty() {
        bail!("{}: no {split} samples", dir.display());
    }
    Ok(loaded.samples)
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_owned()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    let (data_dir, task) = apply_model_args(&mut cfg, &a.model)?;
    if let Some(r) = a.rank {
        cfg.lora.rank = r;
    }
    cfg.lora = a.ablation.lora(&cfg.lora);
    cfg.loss = a.ablation.weights();
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| {
        cfg.out_root()
            .join(format!("train-{task}-r{}-{}", cfg.lora.rank, a.ablation))
    });
    fs::create_dir_all(&out)?;
    cfg.paths.out = Some(out.clone());
    cfg.save(&out.join("config.toml"))?;

    let samples = load_split(&data_dir, Split::Train, task)?;
    let mut model = load_base(&cfg)?;
    inject(&mut model, &cfg.lora)?;
    let mut log = BufWriter::new(fs::File::create(out.join("steps.csv"))?);
    let setup = cfg.setup();
    let every = (setup.train.total_steps / 20).max(1);
    let result = train(&mut model, &samples, &setup, Some(&mut log), |r| {
        if r.step % every == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", r.step, r.lr, r.loss.total);
        }
    });
    let mut ckpt = Checkpoint::from_model(&model, CheckpointKind::Adapter, Some(cfg.lora.clone()));
    ckpt.meta.note = a.ablation.to_string();
    let path = out.join("adapter.sl2l");
    ckpt.save::<f32>(&path)?;
    // On a non-finite loss the model still holds the last good step.
    result.with_context(|| format!("training aborted; last good adapters kept in {}", path.display()))?;
    println!("wrote {}", path.display());
    println!("trainable_fraction={:.6}", trainable_fraction(&model));
    Ok(())
}

fn modes_or_all(modes: Vec<PromptMode>) -> Vec<PromptMode> {
    if modes.is_empty() {
        PromptMode::ALL.to_vec()
    } else {
        modes
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(b) = a.base {
        cfg.paths.base = Some(b);
    }
    if let Some(s) = a.seed {
        cfg.grid.seed = s;
    }
    let data_dir = a
        .data
        .or(cfg.paths.data.clone())
        .context("no dataset: pass --data or set paths.data")?;
    let task = a.task.unwrap_or(cfg.synth.task);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let lora: LoraConfig = ckpt.meta.lora.clone().context("evaluation needs an adapter checkpoint")?;
    let ablation = ckpt.meta.note.parse().unwrap_or(AblationMode::Abl0);
    let base = load_base(&cfg)?;
    let model = ckpt.restore_onto(base)?;
    let data = Dataset {
        name: dataset_name(&data_dir),
        task,
        train: Vec::new(),
        test: load_split(&data_dir, Split::Test, task)?,
    };
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.with_file_name("report.csv"));
    let overlays = a.dump_overlays.then(|| out.with_file_name("overlays"));
    let hash = config_hash(&ckpt.meta)?;
    let rows = evaluate_cell(
        &model,
        &data,
        lora.rank,
        ablation,
        &modes_or_all(a.modes),
        cfg.grid.seed,
        &hash,
        overlays.as_deref(),
    )?;
    let report = seglora::eval::EvalReport { rows };
    report.save_csv(&out)?;
    for r in &report.rows {
        println!(
            "{} dice {:.4} ± {:.4} auc {:.4} (n={}, excluded {})",
            r.prompt_mode, r.dice_mean, r.dice_std, r.auc_mean, r.n_samples, r.n_excluded
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    let (data_dir, task) = apply_model_args(&mut cfg, &a.model)?;
    if !a.ranks.is_empty() {
        cfg.grid.ranks = a.ranks;
    }
    if !a.ablations.is_empty() {
        cfg.grid.ablations = a.ablations;
    }
    if !a.modes.is_empty() {
        cfg.grid.prompt_modes = a.modes;
    }
    if let Some(w) = a.workers {
        cfg.grid.workers = w;
    }
    if let Some(c) = a.checkpoints {
        cfg.paths.checkpoints = Some(c);
    }
    cfg.validate()?;
    let root = cfg.out_root();
    let ckpt_dir = cfg.paths.checkpoints.clone().unwrap_or_else(|| root.join("checkpoints"));
    let out = a.out.unwrap_or_else(|| root.join(format!("sweep-{task}.csv")));
    let data = Dataset {
        name: dataset_name(&data_dir),
        task,
        train: load_split(&data_dir, Split::Train, task)?,
        test: load_split(&data_dir, Split::Test, task)?,
    };
    let spec = GridSpec {
        base: load_base(&cfg)?,
        lora: cfg.lora.clone(),
        setup: cfg.setup(),
        grid: cfg.grid.clone(),
        policy: if a.train_missing {
            CheckpointPolicy::TrainMissing
        } else {
            CheckpointPolicy::EvalOnly
        },
        checkpoint_dir: Some(ckpt_dir),
        overlay_dir: a.dump_overlays.then(|| out.with_file_name("overlays")),
    };
    let report = run_grid(&spec, &[data])?;
    report.save_csv(&out)?;
    cfg.save(&out.with_extension("toml"))?;
    let undefined: usize = report.rows.iter().map(|r| r.auc_undefined).sum();
    if undefined > 0 {
        log::warn!("{undefined} evaluations had an undefined AUC (single-class mask); see the auc_undefined column");
    }
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let base = match &a.base {
        Some(p) => Checkpoint::load(p)?.restore::<f32>()?,
        None => SegModel::new(&ckpt.meta.model)?,
    };
    let mut model = ckpt.restore_onto(base)?;
    let n = merge_all(&mut model)?;
    Checkpoint::from_model(&model, CheckpointKind::Full, None).save::<f32>(&a.out)?;
    println!("merged {n} adapters into {}", a.out.display());
    Ok(())
}
