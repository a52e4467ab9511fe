//! Generic segmentation scenes used to pretrain the base network: curved
//! strokes and filled ellipses on a textured background. The mask is the
//! union of all objects.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::synth::{texture, Ellipse, StrokeLayer, SynthConfig};
use super::{normalize, SegSample};
use crate::error::Result;
use crate::numerics::Tensor;

fn colour<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

/// Pushes `c` at least `gap` away from `bg` in mean intensity.
fn contrast(mut c: [f64; 3], bg: [f64; 3], gap: f64) -> [f64; 3] {
    let mean = |v: [f64; 3]| (v[0] + v[1] + v[2]) / 3.0;
    let d = mean(c) - mean(bg);
    if d.abs() < gap {
        let shift = if mean(bg) > 0.5 { -gap - d } else { gap - d };
        c.iter_mut().for_each(|v| *v = (*v + shift).clamp(0.0, 1.0));
    }
    c
}

pub(super) fn shapes_sample(cfg: &SynthConfig) -> Result<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let s = n as f64;
    let bg = colour(&mut rng);
    let tex = texture(&mut rng, n, 0.15);
    let mut rgb: Vec<[f64; 3]> = tex.iter().map(|t| bg.map(|c| c * (1.0 + t))).collect();
    let mut mask = vec![false; n * n];

    for _ in 0..rng.random_range(1..=3) {
        let e = Ellipse {
            cx: rng.random_range(0.1..0.9) * s,
            cy: rng.random_range(0.1..0.9) * s,
            a: rng.random_range(0.04..0.18) * s,
            b: rng.random_range(0.04..0.18) * s,
            angle: rng.random_range(0.0..PI),
        };
        let c = contrast(colour(&mut rng), bg, 0.2);
        for y in 0..n {
            for x in 0..n {
                let sd = e.signed_distance(x as f64 + 0.5, y as f64 + 0.5);
                let cover = (0.5 - sd).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let i = y * n + x;
                    rgb[i] = std::array::from_fn(|k| rgb[i][k] * (1.0 - cover) + c[k] * cover);
                    mask[i] |= sd <= 0.0;
                }
            }
        }
    }

    for _ in 0..rng.random_range(2..=6) {
        let mut layer = StrokeLayer {
            size: n,
            cover: vec![0.0; n * n],
        };
        let width = rng.random_range(cfg.min_width_px.max(1.0)..=(cfg.min_width_px.max(1.0) * 3.0));
        let mut at = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let mut angle = rng.random_range(0.0..2.0 * PI);
        let bend = rng.random_range(-0.35..0.35);
        for _ in 0..rng.random_range(4..12) {
            angle += bend + rng.random_range(-0.2..0.2);
            let step = rng.random_range(0.04..0.1) * s;
            let next = (at.0 + angle.cos() * step, at.1 + angle.sin() * step);
            layer.stroke(at, next, width);
            at = next;
        }
        let c = contrast(colour(&mut rng), bg, 0.2);
        for (i, &cover) in layer.cover.iter().enumerate() {
            if cover > 0.0 {
                rgb[i] = std::array::from_fn(|k| rgb[i][k] * (1.0 - cover) + c[k] * cover);
                mask[i] |= cover >= 0.5;
            }
        }
    }

    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let mut image = vec![0.0f32; 3 * n * n];
    for (i, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            image[c * n * n + i] = (px[c] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let mut image = Tensor::new(&[3, n, n], image)?;
    normalize(&mut image);
    Ok(SegSample {
        image,
        mask: Tensor::new(&[n, n], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?,
        task: cfg.task,
        source_id: format!("synth-shapes-{:016x}", cfg.seed),
    })
}
