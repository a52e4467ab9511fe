use seglora::checkpoint::{base_digest, Checkpoint, CheckpointKind};
use seglora::data::{generate_dataset, SegSample, SynthConfig, Task};
use seglora::eval::{
    run_grid, AblationMode, CheckpointPolicy, Dataset, EvalReport, GridConfig, GridSpec, PromptMode,
};
use seglora::lora::{adapter_tensors, inject, LoraConfig};
use seglora::train::{train, TrainSetup, STEP_LOG_HEADER};
use seglora::{Error, ModelConfig, PromptSet, SegModel};

fn data(n: usize, seed: u64) -> Vec<SegSample> {
    generate_dataset(
        &SynthConfig {
            size: 64,
            seed,
            ..SynthConfig::default()
        },
        n,
    )
    .unwrap()
}

fn adapted(rank: usize) -> SegModel<f32> {
    let mut m = SegModel::new(&ModelConfig::default()).unwrap();
    inject(&mut m, &LoraConfig::with_rank(rank)).unwrap();
    m
}

fn setup(steps: usize) -> TrainSetup {
    let mut s = TrainSetup::desk(steps);
    s.train.batch_size = 2;
    s.train.lr = 3e-3;
    s
}

#[test]
fn training_is_bit_reproducible_and_leaves_the_base_alone() {
    let train_set = data(3, 1);
    let base = adapted(4);
    let run = |seed| {
        let mut m = base.clone();
        let mut s = setup(6);
        s.train.seed = seed;
        s.augment = Some(Default::default());
        let mut log = Vec::new();
        let report = train(&mut m, &train_set, &s, Some(&mut log), |_| {}).unwrap();
        (m, report, String::from_utf8(log).unwrap())
    };
    let (m1, r1, log1) = run(5);
    let (m2, r2, log2) = run(5);
    let (m3, _, _) = run(6);
    assert_eq!(log1, log2);
    assert_eq!(r1.steps, r2.steps);
    assert_eq!(adapter_tensors(&m1), adapter_tensors(&m2));
    assert_ne!(adapter_tensors(&m1), adapter_tensors(&m3));
    assert_ne!(adapter_tensors(&m1), adapter_tensors(&base));
    assert_eq!(base_digest(&m1), base_digest(&base));

    let lines: Vec<&str> = log1.lines().collect();
    assert_eq!(lines[0], STEP_LOG_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(r1.trainable_fraction > 0.0 && r1.trainable_fraction < 0.05);
}

#[test]
fn loss_falls_when_overfitting_one_sample() {
    let one = data(1, 2);
    let mut m = adapted(8);
    let mut s = setup(40);
    s.train.batch_size = 1;
    s.prompt_modes = vec![PromptMode::Eval5];
    let r = train(&mut m, &one, &s, None, |_| {}).unwrap();
    let first = r.steps[..5].iter().map(|s| s.loss.total).sum::<f64>();
    let last = r.steps[35..].iter().map(|s| s.loss.total).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts_before_the_update() {
    let mut bad = data(1, 3);
    bad[0].image.data_mut()[17] = f32::NAN;
    let mut m = adapted(4);
    let before = adapter_tensors(&m);
    let r = train(&mut m, &bad, &setup(3), None, |_| {});
    assert!(matches!(r, Err(Error::NonFiniteLoss(0))));
    assert_eq!(adapter_tensors(&m), before);
}

#[test]
fn training_needs_trainable_parameters_and_data() {
    let mut frozen = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    frozen.freeze_all();
    assert!(matches!(train(&mut frozen, &data(1, 0), &setup(2), None, |_| {}), Err(Error::Config(_))));
    assert!(matches!(train(&mut adapted(2), &[], &setup(2), None, |_| {}), Err(Error::Config(_))));
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    let mut m = base.clone();
    let cfg = LoraConfig::with_rank(4);
    inject(&mut m, &cfg).unwrap();
    train(&mut m, &data(2, 4), &setup(3), None, |_| {}).unwrap();

    let path = dir.path().join("a.sl2l");
    Checkpoint::from_model(&m, CheckpointKind::Adapter, Some(cfg.clone())).save::<f32>(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert!(ckpt.tensors.iter().all(|(_, k, _)| k.is_adapter()));
    let back = ckpt.restore_onto(base.clone()).unwrap();
    assert_eq!(adapter_tensors(&back), adapter_tensors(&m));
    let x = &data(1, 9)[0].image;
    assert_eq!(
        back.predict(x, &PromptSet::default()).unwrap(),
        m.predict(x, &PromptSet::default()).unwrap()
    );

    // A different base is refused.
    let other = SegModel::<f32>::new(&ModelConfig {
        init_seed: 99,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(matches!(ckpt.restore_onto(other), Err(Error::Checkpoint(_))));

    // Full checkpoints in 64-bit are exact.
    let m64 = m.cast::<f64>();
    let bytes = Checkpoint::from_model(&m64, CheckpointKind::Full, Some(cfg)).to_bytes(8).unwrap();
    let full: SegModel<f64> = Checkpoint::from_bytes(&bytes).unwrap().restore().unwrap();
    for ((_, a), (_, b)) in m64.params.iter().zip(full.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }

    let mut corrupt = bytes.clone();
    corrupt[100] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(matches!(Checkpoint::load(&dir.path().join("nope.sl2l")), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn decoder_only_checkpoint_holds_decoder_tensors() {
    let mut m = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    let cfg = AblationMode::Abl5.lora(&LoraConfig::with_rank(4));
    inject(&mut m, &cfg).unwrap();
    let ckpt = Checkpoint::from_model(&m, CheckpointKind::Adapter, Some(cfg));
    assert!(!ckpt.tensors.is_empty());
    assert!(ckpt.tensors.iter().all(|(n, _, _)| n.starts_with("decoder.")), "{:?}", ckpt.tensors[0].0);
}

fn dataset() -> Dataset {
    let all = data(5, 8);
    Dataset {
        name: "tiny".into(),
        task: Task::Vessel,
        train: all[..3].to_vec(),
        test: all[3..].to_vec(),
    }
}

fn spec(grid: GridConfig, policy: CheckpointPolicy, dir: Option<&std::path::Path>) -> GridSpec {
    let mut base = SegModel::new(&ModelConfig::default()).unwrap();
    base.freeze_all();
    GridSpec {
        base,
        lora: LoraConfig::default(),
        setup: TrainSetup::desk(2),
        grid,
        policy,
        checkpoint_dir: dir.map(|d| d.to_path_buf()),
        overlay_dir: None,
    }
}

fn csv(r: &EvalReport) -> String {
    let mut out = Vec::new();
    r.write_csv(&mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn grid_has_one_row_per_cell_and_mode() {
    let grid = GridConfig {
        ranks: vec![2],
        ablations: vec![AblationMode::Abl0],
        ..GridConfig::default()
    };
    let r = run_grid(&spec(grid, CheckpointPolicy::Train, None), &[dataset()]).unwrap();
    assert_eq!(r.rows.len(), 7);
    let modes: Vec<PromptMode> = r.rows.iter().map(|x| x.prompt_mode).collect();
    assert_eq!(modes, PromptMode::ALL);
    assert!(r.rows.iter().all(|x| x.n_samples + x.n_excluded == 2));
    assert_eq!(csv(&r).lines().count(), 8);
}

#[test]
fn grid_output_is_independent_of_workers_and_checkpoint_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridConfig {
        ranks: vec![2, 4],
        ablations: vec![AblationMode::Abl0, AblationMode::Abl5],
        prompt_modes: vec![PromptMode::Eval0, PromptMode::Eval5],
        ..GridConfig::default()
    };
    let missing = run_grid(&spec(grid.clone(), CheckpointPolicy::EvalOnly, Some(dir.path())), &[dataset()]);
    assert!(matches!(missing, Err(Error::MissingCheckpoint(_))));

    let serial = run_grid(&spec(grid.clone(), CheckpointPolicy::TrainMissing, Some(dir.path())), &[dataset()]).unwrap();
    assert_eq!(serial.rows.len(), 8);
    let parallel = run_grid(
        &spec(
            GridConfig {
                workers: 3,
                ..grid.clone()
            },
            CheckpointPolicy::Train,
            None,
        ),
        &[dataset()],
    )
    .unwrap();
    let reloaded = run_grid(&spec(grid, CheckpointPolicy::EvalOnly, Some(dir.path())), &[dataset()]).unwrap();
    assert_eq!(csv(&serial), csv(&parallel));
    assert_eq!(csv(&serial), csv(&reloaded));
    let hashes: std::collections::HashSet<&str> = serial.rows.iter().map(|r| r.config_hash.as_str()).collect();
    assert_eq!(hashes.len(), 4);
}

#[test]
fn overlays_are_written_per_evaluated_sample() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridConfig {
        ranks: vec![2],
        ablations: vec![AblationMode::Abl0],
        prompt_modes: vec![PromptMode::Eval0, PromptMode::Eval1],
        ..GridConfig::default()
    };
    let mut s = spec(grid, CheckpointPolicy::Train, None);
    s.overlay_dir = Some(dir.path().to_path_buf());
    let r = run_grid(&s, &[dataset()]).unwrap();
    let evaluated: usize = r.rows.iter().map(|x| x.n_samples).sum();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), evaluated);
}
