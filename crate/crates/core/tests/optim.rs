use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglora::backbone::{ParamId, ParamKind, ParamSet};
use seglora::optim::{clip_grad_norm, lr_at, AdamState, AdamW, TrainConfig};
use seglora::{Error, Tensor};

fn params(values: &[&[f64]]) -> (ParamSet<f64>, Vec<ParamId>) {
    let mut set = ParamSet::new();
    let ids = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = Tensor::new(&[v.len()], v.to_vec()).unwrap().with_requires_grad(true);
            set.add(format!("p{i}"), ParamKind::Base, t)
        })
        .collect();
    (set, ids)
}

fn set_grads(set: &mut ParamSet<f64>, ids: &[ParamId], grads: &[Vec<f64>]) {
    set.zero_grad();
    for (id, g) in ids.iter().zip(grads) {
        set.tensor_mut(*id).accumulate_grad(g).unwrap();
    }
}

fn adam(wd: f64) -> AdamW {
    AdamW::from_config(&TrainConfig {
        weight_decay: wd,
        ..TrainConfig::default()
    })
}

#[test]
fn zero_gradient_applies_pure_decay() {
    let (mut set, ids) = params(&[&[2.0, -4.0]]);
    set_grads(&mut set, &ids, &[vec![0.0, 0.0]]);
    adam(0.01).step(&mut set, &mut AdamState::new(), 0.1, 0).unwrap();
    assert_eq!(set.tensor(ids[0]).data(), &[2.0 * (1.0 - 0.1 * 0.01), -4.0 * (1.0 - 0.1 * 0.01)]);
}

#[test]
fn first_step_moves_by_lr_times_sign() {
    let (mut set, ids) = params(&[&[1.0, 1.0, 1.0]]);
    set_grads(&mut set, &ids, &[vec![3.0, -0.5, 1e-3]]);
    let opt = adam(0.0);
    opt.step(&mut set, &mut AdamState::new(), 1e-2, 0).unwrap();
    for (&p, &g) in set.tensor(ids[0]).data().iter().zip(&[3.0f64, -0.5, 1e-3]) {
        let want = 1.0 - 1e-2 * g / (g.abs() + opt.eps);
        assert!((p - want).abs() < 1e-15);
    }
}

#[test]
fn identical_parameters_get_identical_updates() {
    let (mut set, ids) = params(&[&[0.3, -0.2], &[0.3, -0.2]]);
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..10 {
        let g: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        set_grads(&mut set, &ids, &[g.clone(), g]);
        adam(0.1).step(&mut set, &mut state, 1e-2, step).unwrap();
    }
    assert_eq!(set.tensor(ids[0]).data(), set.tensor(ids[1]).data());
}

#[test]
fn matches_reference_adam_over_100_steps() {
    let init = [0.5, -1.5, 2.0, 0.0];
    let (mut set, ids) = params(&[&init]);
    let opt = adam(0.0);
    let mut state = AdamState::new();
    let (mut w, mut m, mut v) = (init.to_vec(), vec![0.0; 4], vec![0.0; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for step in 0..100 {
        let lr = 1e-2 * (1.0 + (step as f64 * 0.1).sin()) / 2.0;
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        set_grads(&mut set, &ids, &[g.clone()]);
        opt.step(&mut set, &mut state, lr, step).unwrap();
        let t = (step + 1) as i32;
        for i in 0..4 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    for (a, b) in set.tensor(ids[0]).data().iter().zip(&w) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn non_finite_gradient_aborts_without_touching_weights() {
    let (mut set, ids) = params(&[&[1.0, 2.0]]);
    set_grads(&mut set, &ids, &[vec![f64::NAN, 1.0]]);
    let r = adam(0.0).step(&mut set, &mut AdamState::new(), 0.1, 7);
    assert!(matches!(r, Err(Error::NonFiniteGradient { step: 7, .. })));
    assert_eq!(set.tensor(ids[0]).data(), &[1.0, 2.0]);
}

#[test]
fn frozen_parameters_are_not_updated() {
    let (mut set, ids) = params(&[&[1.0], &[1.0]]);
    set.tensor_mut(ids[1]).set_requires_grad(false);
    set_grads(&mut set, &ids[..1], &[vec![1.0]]);
    adam(0.5).step(&mut set, &mut AdamState::new(), 0.1, 0).unwrap();
    assert_ne!(set.tensor(ids[0]).data(), &[1.0]);
    assert_eq!(set.tensor(ids[1]).data(), &[1.0]);
}

#[test]
fn clipping_caps_the_joint_norm() {
    let (mut set, ids) = params(&[&[0.0, 0.0], &[0.0]]);
    set_grads(&mut set, &ids, &[vec![3.0, 0.0], vec![4.0]]);
    assert_eq!(clip_grad_norm(&mut set, 1.0), 5.0);
    let g: Vec<f64> = ids.iter().flat_map(|&id| set.tensor(id).grad().unwrap().to_vec()).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    assert!((g[0] / g[2] - 0.75).abs() < 1e-12);

    set_grads(&mut set, &ids, &[vec![0.3, 0.0], vec![0.4]]);
    clip_grad_norm(&mut set, 1.0);
    assert_eq!(set.tensor(ids[0]).grad().unwrap(), &[0.3, 0.0]);
}

#[test]
fn schedule_worked_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert_eq!(lr_at(1000, &cfg), 1e-4);
    assert_eq!(lr_at(1500, &cfg), 5e-5);
    assert_eq!(lr_at(500, &cfg), 5e-5);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::paper_scale().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            warmup_steps: 2000,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_restarts_at_base_lr(
        warmup in 1usize..200,
        period in 1usize..300,
        mult in 1usize..4,
        step in 0usize..5000,
    ) {
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_steps: warmup,
            restart_period: period,
            restart_mult: mult,
            total_steps: 10_000,
            ..TrainConfig::default()
        };
        let lr = lr_at(step, &cfg);
        prop_assert!((0.0..=cfg.lr).contains(&lr));
        if step <= warmup {
            prop_assert!((lr - cfg.lr * step as f64 / warmup as f64).abs() < 1e-18);
        }
        // Every restart begins a cycle at the base rate.
        let mut start = warmup;
        let mut p = period;
        while start < 5000 {
            prop_assert_eq!(lr_at(start, &cfg), cfg.lr);
            start += p;
            p *= mult;
        }
    }

    #[test]
    fn schedule_is_continuous_inside_a_cycle(step in 1000usize..1999) {
        let cfg = TrainConfig::default();
        let d = (lr_at(step + 1, &cfg) - lr_at(step, &cfg)).abs();
        prop_assert!(d <= cfg.lr * std::f64::consts::PI / 2000.0 + 1e-18);
        prop_assert!(lr_at(step + 1, &cfg) <= lr_at(step, &cfg));
    }
}
