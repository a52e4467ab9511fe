use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seglora::backbone::{Ctx, Linear, ModelConfig, ParamKind, ParamSet, Part, PromptSet, SegModel};
use seglora::eval::AblationMode;
use seglora::lora::{
    adapters, inject, merge, merge_all, trainable_fraction, AdapterState, LoraAdapter, LoraConfig, Projection,
};
use seglora::{Error, Scalar, Tensor};

fn image<T: Scalar>(seed: u64) -> Tensor<T> {
    Tensor::randn(&[3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn prompts() -> PromptSet {
    PromptSet {
        positive_points: vec![(12.0, 30.0)],
        negative_points: vec![],
        boxes: vec![(4.0, 6.0, 40.0, 50.0)],
    }
}

/// Overwrites every adapter tensor with Gaussian noise.
fn randomize_adapters<T: Scalar>(model: &mut SegModel<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.params.iter_mut().filter(|(_, p)| p.kind.is_adapter()) {
        let fresh = Tensor::<T>::randn(p.tensor.shape(), std, &mut rng);
        p.tensor.data_mut().copy_from_slice(fresh.data());
    }
}

/// A standalone adapted projection `d_out x d_in` with rank `r`.
fn linear<T: Scalar>(d_in: usize, d_out: usize, r: usize, alpha: f64, seed: u64) -> (ParamSet<T>, Linear) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let weight = params.add("w", ParamKind::Base, Tensor::randn(&[d_out, d_in], 0.5, &mut rng));
    let bias = params.add("bias", ParamKind::Base, Tensor::randn(&[d_out], 0.5, &mut rng));
    let a = params.add("a", ParamKind::LoraA, Tensor::randn(&[r, d_in], 0.5, &mut rng));
    let b = params.add("b", ParamKind::LoraB, Tensor::randn(&[d_out, r], 0.5, &mut rng));
    let layer = Linear {
        name: "proj".into(),
        weight,
        bias: Some(bias),
        d_in,
        d_out,
        lora: Some(LoraAdapter {
            a,
            b,
            rank: r,
            alpha,
            state: AdapterState::Attached,
        }),
    };
    (params, layer)
}

fn run<T: Scalar>(params: &ParamSet<T>, layer: &Linear, x: &Tensor<T>) -> Vec<T> {
    let mut ctx = Ctx::new(params);
    let xv = ctx.tape.constant(x.shape(), x.data().to_vec()).unwrap();
    let y = layer.forward(&mut ctx, xv).unwrap();
    ctx.tape.value(y).to_vec()
}

#[test]
fn zero_init_adapters_leave_the_forward_bit_identical() {
    let base = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    let x = image::<f32>(0);
    let reference = base.predict(&x, &prompts()).unwrap();
    for rank in [8, 16, 32, 64] {
        let mut m = base.clone();
        inject(&mut m, &LoraConfig::with_rank(rank)).unwrap();
        assert_eq!(m.predict(&x, &prompts()).unwrap().data(), reference.data(), "rank {rank}");
    }
}

#[test]
fn full_rank_adapter_matches_dense_delta() {
    let (params, layer) = linear::<f64>(4, 4, 4, 6.0, 1);
    let x: Tensor<f64> = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let got = run(&params, &layer, &x);
    let ad = layer.lora.as_ref().unwrap();
    let (w, bias, a, b) = (
        params.tensor(layer.weight).data(),
        params.tensor(layer.bias.unwrap()).data(),
        params.tensor(ad.a).data(),
        params.tensor(ad.b).data(),
    );
    let s = 6.0 / 4.0;
    for n in 0..3 {
        for o in 0..4 {
            let mut want = bias[o];
            for i in 0..4 {
                let delta: f64 = (0..4).map(|k| b[o * 4 + k] * a[k * 4 + i]).sum();
                want += (w[o * 4 + i] + s * delta) * x.data()[n * 4 + i];
            }
            assert!((got[n * 4 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn doubling_alpha_doubles_the_delta() {
    let (params, layer) = linear::<f64>(6, 5, 2, 4.0, 3);
    let mut doubled = layer.clone();
    doubled.lora.as_mut().unwrap().alpha = 8.0;
    let mut plain = layer.clone();
    plain.lora = None;
    let x: Tensor<f64> = Tensor::randn(&[4, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let base = run(&params, &plain, &x);
    let y1 = run(&params, &layer, &x);
    let y2 = run(&params, &doubled, &x);
    for i in 0..base.len() {
        assert!(((y2[i] - base[i]) - 2.0 * (y1[i] - base[i])).abs() < 1e-12);
    }
}

#[test]
fn merging_zero_adapters_keeps_weights_exactly() {
    let base = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    let mut m = base.clone();
    inject(&mut m, &LoraConfig::with_rank(8)).unwrap();
    merge_all(&mut m).unwrap();
    for ((_, a), (_, b)) in base.params.iter().zip(m.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
}

#[test]
fn merged_model_agrees_with_adapted_model() {
    let base = SegModel::<f64>::new(&ModelConfig::default()).unwrap();
    let mut m = base.clone();
    inject(&mut m, &LoraConfig::with_rank(8)).unwrap();
    randomize_adapters(&mut m, 0.05, 5);
    let mut merged = m.clone();
    assert_eq!(merge_all(&mut merged).unwrap(), adapters(&m).len());
    assert!(adapters(&merged).is_empty());
    for seed in 0..5 {
        let x = image::<f64>(seed);
        let a = m.predict(&x, &prompts()).unwrap();
        let b = merged.predict(&x, &prompts()).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "seed {seed}: {diff}");
    }
}

#[test]
fn merging_twice_is_rejected_and_reinjection_starts_fresh() {
    let mut m = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    inject(&mut m, &LoraConfig::with_rank(4)).unwrap();
    assert!(matches!(inject(&mut m, &LoraConfig::with_rank(4)), Err(Error::AlreadyInjected)));
    let name = adapters(&m)[0].layer.clone();
    merge(&mut m, &name).unwrap();
    assert!(matches!(merge(&mut m, &name), Err(Error::AlreadyMerged(_))));
    merge_all(&mut m).unwrap();

    let sites = inject(&mut m, &LoraConfig::with_rank(4)).unwrap();
    assert!(!sites.is_empty());
    for s in &sites {
        assert!(m.params.tensor(s.adapter.b).data().iter().all(|&v| v == 0.0));
        assert!(m.params.tensor(s.adapter.a).requires_grad());
    }
}

#[test]
fn adapter_count_and_placement() {
    let base = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    let blocks: Vec<Part> = base.net.attention_blocks().map(|(p, _)| p).collect();
    let n_enc = blocks.iter().filter(|&&p| p == Part::Encoder).count();
    let n_dec = blocks.len() - n_enc;
    assert!(n_enc > 0 && n_dec > 0);

    for (mode, want_enc, want_dec) in [
        (AblationMode::Abl0, n_enc, n_dec),
        (AblationMode::Abl4, n_enc, 0),
        (AblationMode::Abl5, 0, n_dec),
    ] {
        let mut m = base.clone();
        let sites = inject(&mut m, &mode.lora(&LoraConfig::with_rank(8))).unwrap();
        let enc = sites.iter().filter(|s| s.part == Part::Encoder).count();
        let dec = sites.len() - enc;
        assert_eq!((enc, dec), (4 * want_enc, 4 * want_dec), "{mode}");
    }

    let mut m = base.clone();
    let cfg = LoraConfig {
        targets: vec![Projection::Q, Projection::V],
        ..LoraConfig::with_rank(8)
    };
    assert_eq!(inject(&mut m, &cfg).unwrap().len(), 2 * blocks.len());

    let nowhere = LoraConfig {
        apply_to_encoder: false,
        apply_to_decoder: false,
        ..LoraConfig::default()
    };
    assert!(matches!(inject(&mut base.clone(), &nowhere), Err(Error::Config(_))));
}

#[test]
fn trainable_fraction_counts_adapters_linearly() {
    let mut base = SegModel::<f32>::new(&ModelConfig::default()).unwrap();
    base.freeze_all();
    assert_eq!(trainable_fraction(&base), 0.0);
    let frac = |rank| {
        let mut m = base.clone();
        inject(&mut m, &LoraConfig::with_rank(rank)).unwrap();
        trainable_fraction(&m)
    };
    let f: Vec<f64> = [8, 16, 32, 64].into_iter().map(frac).collect();
    assert!(f.windows(2).all(|w| w[0] < w[1]));
    assert!(f[0] < 0.05 && f[1] < 0.05);
    assert!((f[3] / f[0] - 8.0).abs() < 0.08);
}

#[test]
fn only_adapters_receive_gradients() {
    let mut m = SegModel::<f64>::new(&ModelConfig::default()).unwrap();
    inject(&mut m, &LoraConfig::with_rank(4)).unwrap();
    let x = image::<f64>(7);
    let mut ctx = Ctx::new(&m.params);
    let xv = ctx.tape.constant(x.shape(), x.data().to_vec()).unwrap();
    let y = m.forward(&mut ctx, xv, &prompts()).unwrap();
    let s = ctx.tape.sum(y);
    ctx.tape.backward(s).unwrap();
    let grads = ctx.take_grads();
    assert_eq!(grads.len(), m.params.trainable_ids().len());
    for (id, g) in &grads {
        let p = m.params.get(*id);
        assert!(p.kind.is_adapter(), "{} got a gradient", p.name);
        // With B = 0 only B sees a signal.
        let nonzero = g.iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, p.kind == ParamKind::LoraB, "{}", p.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_matches_adapter_on_a_projection(
        d_in in 1usize..12,
        d_out in 1usize..12,
        r in 1usize..6,
        alpha in 0.5f64..64.0,
        seed in any::<u64>(),
    ) {
        let (mut params, layer) = linear::<f64>(d_in, d_out, r, alpha, seed);
        let x: Tensor<f64> = Tensor::randn(&[5, d_in], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let before = run(&params, &layer, &x);

        let ad = layer.lora.clone().unwrap();
        let (a, b) = (params.tensor(ad.a).clone(), params.tensor(ad.b).clone());
        let w = params.tensor_mut(layer.weight);
        for o in 0..d_out {
            for i in 0..d_in {
                let delta: f64 = (0..r).map(|k| b.data()[o * r + k] * a.data()[k * d_in + i]).sum();
                w.data_mut()[o * d_in + i] += ad.scale() * delta;
            }
        }
        let mut merged = layer.clone();
        merged.lora = None;
        let after = run(&params, &merged, &x);
        for (p, q) in before.iter().zip(&after) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }
}
