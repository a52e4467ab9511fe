use std::collections::VecDeque;
use std::fs;

use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglora::data::{
    augment, derive_seed, generate_dataset, generate_sample, load_dataset, write_dataset, write_pairs, AugmentConfig,
    Interp, SegSample, Split, SynthConfig, Task, Warp,
};
use seglora::Tensor;

fn synth(task: Task, size: usize, seed: u64) -> SegSample {
    generate_sample(&SynthConfig {
        task,
        size,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn components(mask: &Tensor<f32>) -> usize {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let on = |i: usize| mask.data()[i] > 0.5;
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if !on(start) || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if on(j) && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
    }
    count
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    for task in [Task::Vessel, Task::Disc, Task::Shapes] {
        let a = synth(task, 64, 5);
        let b = synth(task, 64, 5);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        a.validate().unwrap();
        assert_ne!(synth(task, 64, 6).mask, a.mask);
    }
    let cfg = SynthConfig {
        size: 64,
        seed: 3,
        ..SynthConfig::default()
    };
    let set = generate_dataset(&cfg, 3).unwrap();
    let third = synth(Task::Vessel, 64, derive_seed(3, 2));
    assert_eq!(set[2].mask, third.mask);
}

#[test]
fn vessel_foreground_fraction_stays_in_range() {
    for seed in 0..100 {
        let f = synth(Task::Vessel, 256, seed).foreground_fraction();
        assert!((0.02..=0.15).contains(&f), "seed {seed}: {f}");
    }
}

#[test]
fn disc_mask_is_one_component() {
    for seed in 0..50 {
        let s = synth(Task::Disc, 128, seed);
        assert_eq!(components(&s.mask), 1, "seed {seed}");
    }
}

#[test]
fn config_validation() {
    let bad = SynthConfig {
        size: 100,
        ..SynthConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!("vessel".parse::<Task>().is_ok());
    assert!("retina".parse::<Task>().is_err());
}

#[test]
fn flips_are_involutions() {
    let s = synth(Task::Vessel, 64, 1);
    for warp in [Warp::hflip(64), Warp::vflip(64)] {
        let twice = warp.apply_sample(&warp.apply_sample(&s));
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.mask, s.mask);
    }
    let once = Warp::hflip(64).apply(&s.mask.clone().reshape(&[1, 64, 64]).unwrap(), Interp::Nearest);
    assert_eq!(once.data()[5], s.mask.data()[58]);
}

#[test]
fn rotation_keeps_mask_area() {
    let s = synth(Task::Vessel, 128, 2);
    let area = |m: &Tensor<f32>| m.data().iter().filter(|&&v| v > 0.5).count() as f64;
    let base = area(&s.mask);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..100 {
        let theta = rng.random_range(-30.0..=30.0);
        let r = Warp::rotation(theta, 128, 128).apply_sample(&s);
        let ratio = area(&r.mask) / base;
        assert!((0.85..=1.15).contains(&ratio), "seed {seed}, {theta:.1} deg: ratio {ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>()) {
        let s = synth(Task::Vessel, 64, seed % 4);
        let out = augment(&s, &AugmentConfig::default(), seed);
        prop_assert_eq!(out.mask.shape(), s.mask.shape());
        prop_assert_eq!(out.image.shape(), s.image.shape());
        prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(out.image.is_finite());
        prop_assert_eq!(&out, &augment(&s, &AugmentConfig::default(), seed));
    }

    #[test]
    fn derived_seeds_do_not_collide(seed in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        prop_assume!(i != j);
        prop_assert_ne!(derive_seed(seed, i), derive_seed(seed, j));
    }
}

fn pool(n: usize) -> (tempfile::TempDir, Vec<SegSample>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        size: 64,
        seed: 11,
        ..SynthConfig::default()
    };
    let samples = generate_dataset(&cfg, n).unwrap();
    write_pairs(dir.path(), &samples).unwrap();
    (dir, samples)
}

#[test]
fn pool_without_split_file_is_split_75_25() {
    let (dir, samples) = pool(8);
    let train = load_dataset(dir.path(), Split::Train, Task::Vessel).unwrap();
    let test = load_dataset(dir.path(), Split::Test, Task::Vessel).unwrap();
    assert_eq!((train.samples.len(), test.samples.len()), (6, 2));
    assert!(train.split_seed.is_some());

    let again = load_dataset(dir.path(), Split::Test, Task::Vessel).unwrap();
    let ids = |v: &[SegSample]| v.iter().map(|s| s.source_id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&test.samples), ids(&again.samples));
    for s in &test.samples {
        assert!(!ids(&train.samples).contains(&s.source_id));
    }

    // Masks round-trip exactly; images up to 8-bit quantisation.
    let all: Vec<&SegSample> = train.samples.iter().chain(&test.samples).collect();
    for s in all {
        let stem: usize = s.source_id.rsplit('/').next().unwrap().parse().unwrap();
        assert_eq!(s.mask, samples[stem].mask);
        let err = s
            .image
            .data()
            .iter()
            .zip(samples[stem].image.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 0.05, "image error {err}");
    }
}

#[test]
fn split_file_and_split_directories_are_honoured() {
    let (dir, _) = pool(5);
    fs::write(dir.path().join("split.txt"), "00001\n00004\n").unwrap();
    let test = load_dataset(dir.path(), Split::Test, Task::Vessel).unwrap();
    let stems: Vec<&str> = test.samples.iter().map(|s| s.source_id.rsplit('/').next().unwrap()).collect();
    assert_eq!(stems, ["00001", "00004"]);
    assert_eq!(test.split_seed, None);
    assert_eq!(load_dataset(dir.path(), Split::Train, Task::Vessel).unwrap().samples.len(), 3);

    let pre = tempfile::tempdir().unwrap();
    let samples = generate_dataset(
        &SynthConfig {
            size: 64,
            ..SynthConfig::default()
        },
        3,
    )
    .unwrap();
    write_dataset(pre.path(), Split::Train, &samples[..2]).unwrap();
    write_dataset(pre.path(), Split::Test, &samples[2..]).unwrap();
    assert_eq!(load_dataset(pre.path(), Split::Train, Task::Vessel).unwrap().samples.len(), 2);
    assert_eq!(load_dataset(pre.path(), Split::Test, Task::Vessel).unwrap().samples.len(), 1);
}

#[test]
fn orphan_images_are_skipped() {
    let (dir, _) = pool(4);
    RgbImage::from_pixel(64, 64, Rgb([10, 20, 30]))
        .save(dir.path().join("images/orphan.png"))
        .unwrap();
    fs::write(dir.path().join("split.txt"), "orphan\n00000\n").unwrap();
    let test = load_dataset(dir.path(), Split::Test, Task::Vessel).unwrap();
    assert_eq!(test.samples.len(), 1);
    assert_eq!(test.skipped, ["orphan"]);
}

#[test]
fn masks_are_binarised_above_127() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("test/images")).unwrap();
    fs::create_dir_all(dir.path().join("test/masks")).unwrap();
    RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 3) as u8, (y * 3) as u8, 7]))
        .save(dir.path().join("test/images/a.png"))
        .unwrap();
    let levels = [0u8, 127, 128, 255];
    GrayImage::from_fn(64, 64, |x, _| Luma([levels[(x / 16) as usize]]))
        .save(dir.path().join("test/masks/a.png"))
        .unwrap();
    let s = &load_dataset(dir.path(), Split::Test, Task::Disc).unwrap().samples[0];
    let row: Vec<f32> = (0..4).map(|k| s.mask.data()[k * 16]).collect();
    assert_eq!(row, [0.0, 0.0, 1.0, 1.0]);
    for c in 0..3 {
        let plane = &s.image.data()[c * 4096..(c + 1) * 4096];
        let mean: f32 = plane.iter().sum::<f32>() / 4096.0;
        assert!(mean.abs() < 1e-4);
    }
}

#[test]
fn missing_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path(), Split::Train, Task::Vessel).is_err());
}
