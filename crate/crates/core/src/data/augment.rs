//! Seeded augmentation. Geometric transforms are composed into one
//! projective warp that both the image and the mask are resampled through.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, SegSample};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub max_rotation_deg: f64,
    /// Area fraction range kept by the resized crop.
    pub crop_scale: (f64, f64),
    /// Corner displacement as a fraction of the side.
    pub perspective: f64,
    pub perspective_p: f64,
    pub max_shear_deg: f64,
    pub max_translate: f64,
    /// Probability of each of colour jitter, blur and sharpening.
    pub color_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            max_rotation_deg: 30.0,
            crop_scale: (0.7, 1.0),
            perspective: 0.2,
            perspective_p: 0.5,
            max_shear_deg: 8.0,
            max_translate: 0.05,
            color_p: 0.2,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn translation(tx: f64, ty: f64) -> Mat3 {
    [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]
}

/// Solves the 8-parameter homography taking `src[i]` to `dst[i]`.
fn homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Mat3> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (src[i], dst[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..9 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let h: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
    Some([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Maps output pixel centres to input coordinates; both image and mask are
/// always resampled through the same matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    /// Output pixel coordinates to input pixel coordinates.
    pub inverse: Mat3,
}

impl Warp {
    pub fn identity() -> Self {
        Self {
            inverse: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn hflip(width: usize) -> Self {
        Self {
            inverse: [[-1.0, 0.0, width as f64 - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn vflip(height: usize) -> Self {
        Self {
            inverse: [[1.0, 0.0, 0.0], [0.0, -1.0, height as f64 - 1.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `degrees` about the image centre.
    pub fn rotation(degrees: f64, height: usize, width: usize) -> Self {
        let (s, c) = (-degrees.to_radians()).sin_cos();
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Self {
            inverse: mul(&translation(cx, cy), &mul(&r, &translation(-cx, -cy))),
        }
    }

    /// Applies `self` first, then `next`.
    pub fn then(&self, next: &Warp) -> Warp {
        Warp {
            inverse: mul(&self.inverse, &next.inverse),
        }
    }

    fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.inverse;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    /// Resamples every `[H, W]` plane of `planes`; samples falling outside
    /// the input read as zero.
    pub fn apply(&self, planes: &Tensor<f32>, interp: Interp) -> Tensor<f32> {
        let shape = planes.shape().to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = planes.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x as f64, y as f64);
                for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
                    dst[y * w + x] = sample(plane, h, w, sx, sy, interp);
                }
            }
        }
        Tensor::new(&shape, out).expect("same element count")
    }

    /// Warps image and mask together; the mask is re-binarised.
    pub fn apply_sample(&self, s: &SegSample) -> SegSample {
        let mut mask = self.apply(&s.mask, Interp::Nearest);
        mask.data_mut().iter_mut().for_each(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
        SegSample {
            image: self.apply(&s.image, Interp::Bilinear),
            mask,
            task: s.task,
            source_id: s.source_id.clone(),
        }
    }
}

fn sample(plane: &[f32], h: usize, w: usize, x: f64, y: f64, interp: Interp) -> f32 {
    let at = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    match interp {
        Interp::Nearest => at(x.round() as i64, y.round() as i64),
        Interp::Bilinear => {
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
            let (xi, yi) = (x0 as i64, y0 as i64);
            if fx == 0.0 && fy == 0.0 {
                return at(xi, yi);
            }
            let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
            let bottom = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
            top * (1.0 - fy) + bottom * fy
        }
    }
}

/// Draws the composite geometric transform for one sample.
pub fn sample_warp<R: Rng>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Warp {
    let (h, w) = (height as f64, width as f64);
    let mut warp = Warp::identity();
    if rng.random_bool(cfg.hflip_p) {
        warp = warp.then(&Warp::hflip(width));
    }
    if rng.random_bool(cfg.vflip_p) {
        warp = warp.then(&Warp::vflip(height));
    }
    if cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        warp = warp.then(&Warp::rotation(deg, height, width));
    }

    // Affine: shear and translation about the centre.
    let shear = rng.random_range(-cfg.max_shear_deg..=cfg.max_shear_deg).to_radians().tan();
    let tx = rng.random_range(-cfg.max_translate..=cfg.max_translate) * w;
    let ty = rng.random_range(-cfg.max_translate..=cfg.max_translate) * h;
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let affine = mul(
        &translation(cx - tx, cy - ty),
        &mul(&[[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &translation(-cx, -cy)),
    );
    warp = warp.then(&Warp { inverse: affine });

    // Resized crop: output covers a sub-window of the input.
    let (lo, hi) = cfg.crop_scale;
    let area = rng.random_range(lo..=hi);
    let side = area.sqrt();
    let (cw, ch) = (side * w, side * h);
    let ox = rng.random_range(0.0..=(w - cw).max(0.0));
    let oy = rng.random_range(0.0..=(h - ch).max(0.0));
    let crop = [[cw / w, 0.0, ox], [0.0, ch / h, oy], [0.0, 0.0, 1.0]];
    warp = warp.then(&Warp { inverse: crop });

    if cfg.perspective > 0.0 && rng.random_bool(cfg.perspective_p) {
        let d = cfg.perspective / 2.0;
        let corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
        let mut moved = corners;
        for (i, c) in moved.iter_mut().enumerate() {
            let sx = if i == 0 || i == 3 { 1.0 } else { -1.0 };
            let sy = if i < 2 { 1.0 } else { -1.0 };
            c.0 += sx * rng.random_range(0.0..=d) * w;
            c.1 += sy * rng.random_range(0.0..=d) * h;
        }
        if let Some(m) = homography(&corners, &moved) {
            warp = warp.then(&Warp { inverse: m });
        }
    }
    warp
}

fn box_blur3(plane: &mut [f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        s += plane[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Photometric changes to the image alone, each with probability `color_p`.
fn color_ops<R: Rng>(image: &mut Tensor<f32>, cfg: &AugmentConfig, rng: &mut R) -> bool {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut changed = false;
    if rng.random_bool(cfg.color_p) {
        let brightness = rng.random_range(-0.2..0.2f32);
        let contrast = rng.random_range(0.8..1.2f32);
        for ch in image.data_mut().chunks_exact_mut(h * w) {
            let gain = contrast * rng.random_range(0.9..1.1f32);
            ch.iter_mut().for_each(|v| *v = *v * gain + brightness);
        }
        changed = true;
    }
    if rng.random_bool(cfg.color_p) {
        for ch in image.data_mut().chunks_exact_mut(h * w) {
            let blurred = box_blur3(ch, h, w);
            ch.copy_from_slice(&blurred);
        }
        changed = true;
    }
    if rng.random_bool(cfg.color_p) {
        let amount = rng.random_range(0.3..1.0f32);
        for ch in image.data_mut().chunks_exact_mut(h * w) {
            let blurred = box_blur3(ch, h, w);
            ch.iter_mut().zip(&blurred).for_each(|(v, b)| *v += amount * (*v - b));
        }
        changed = true;
    }
    changed
}

/// Random geometric and photometric augmentation; a pure function of
/// `(sample, cfg, seed)`. The image is re-normalised afterwards.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, seed: u64) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warp = sample_warp(cfg, sample.height(), sample.width(), &mut rng);
    let mut out = warp.apply_sample(sample);
    color_ops(&mut out.image, cfg, &mut rng);
    normalize(&mut out.image);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_maps_corners() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let dst = [(1.0, 0.5), (9.0, 1.0), (10.0, 9.0), (0.0, 10.0)];
        let m = homography(&src, &dst).unwrap();
        let w = Warp { inverse: m };
        for (s, d) in src.iter().zip(&dst) {
            let (x, y) = w.source(s.0, s.1);
            assert!((x - d.0).abs() < 1e-9 && (y - d.1).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Warp::rotation(0.0, 2, 3).apply(&t, Interp::Bilinear), t);
    }
}
