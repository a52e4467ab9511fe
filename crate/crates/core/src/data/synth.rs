//! Procedural fundus-like images: a textured reddish field with an optic
//! disc and a branching vessel tree rooted at the disc.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, normalize, SegSample, Task, MIN_SIDE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub task: Task,
    /// Levels of binary branching below each trunk.
    pub depth: usize,
    /// Width ratio between a branch and its parent.
    pub width_decay: f64,
    /// Trunk width as a fraction of the image side.
    pub trunk_width: f64,
    /// Branches never render thinner than this many pixels.
    pub min_width_px: f64,
    /// Disc radius range as fractions of the image side.
    pub disc_radius: (f64, f64),
    pub texture_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 256,
            task: Task::Vessel,
            depth: 6,
            width_decay: 0.75,
            trunk_width: 0.04,
            min_width_px: 4.0,
            disc_radius: (0.08, 0.22),
            texture_amplitude: 0.08,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.size < MIN_SIDE || self.size % 32 != 0 {
            return fail(format!("size {} must be a multiple of 32 and at least {MIN_SIDE}", self.size));
        }
        let (lo, hi) = self.disc_radius;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return fail(format!("disc radius range ({lo}, {hi}) must lie in (0, 0.5)"));
        }
        if !(0.0 < self.width_decay && self.width_decay <= 1.0) {
            return fail(format!("width_decay {} must lie in (0, 1]", self.width_decay));
        }
        if !(self.trunk_width > 0.0 && self.min_width_px >= 0.0 && self.texture_amplitude >= 0.0) {
            return fail("widths and texture amplitude must be non-negative".into());
        }
        Ok(())
    }
}

/// Fraction of the side covered by the circular field of view.
const FIELD_RADIUS: f64 = 0.47;

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn idx(&self, x: usize, y: usize) -> usize {
        y * self.size + x
    }
}

#[derive(Clone, Copy)]
pub(super) struct Ellipse {
    pub(super) cx: f64,
    pub(super) cy: f64,
    pub(super) a: f64,
    pub(super) b: f64,
    pub(super) angle: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels; negative inside.
    pub(super) fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        ((u * u + v * v).sqrt() - 1.0) * self.a.min(self.b)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.signed_distance(x, y) <= 0.0
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Max-accumulated coverage of anti-aliased round-capped strokes.
pub(super) struct StrokeLayer {
    pub(super) size: usize,
    pub(super) cover: Vec<f64>,
}

impl StrokeLayer {
    pub(super) fn stroke(&mut self, a: (f64, f64), b: (f64, f64), width: f64) {
        let r = width / 2.0 + 1.0;
        let s = self.size as f64;
        let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
        let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + r).ceil().min(s - 1.0)).max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + r).ceil().min(s - 1.0)).max(0.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
                let c = (width / 2.0 - d + 0.5).clamp(0.0, 1.0);
                let slot = &mut self.cover[y * self.size + x];
                *slot = slot.max(c);
            }
        }
    }
}

struct TreeParams {
    depth: usize,
    width_decay: f64,
    min_width: f64,
}

fn grow<R: Rng>(
    layer: &mut StrokeLayer,
    rng: &mut R,
    p: &TreeParams,
    start: (f64, f64),
    mut angle: f64,
    length: f64,
    width: f64,
    level: usize,
) {
    const PIECES: usize = 4;
    let w = width.max(p.min_width);
    let mut at = start;
    for _ in 0..PIECES {
        angle += rng.random_range(-0.18..0.18);
        let next = (
            at.0 + angle.cos() * length / PIECES as f64,
            at.1 + angle.sin() * length / PIECES as f64,
        );
        layer.stroke(at, next, w);
        at = next;
    }
    if level < p.depth {
        let spread = rng.random_range(0.35..0.65);
        let skew = rng.random_range(-0.15..0.15);
        for side in [-1.0, 1.0] {
            let child_len = length * rng.random_range(0.62..0.8);
            grow(
                layer,
                rng,
                p,
                at,
                angle + side * spread + skew,
                child_len,
                width * p.width_decay,
                level + 1,
            );
        }
    }
}

/// Smooth multiplicative texture: a sum of random plane waves.
pub(super) fn texture<R: Rng>(rng: &mut R, size: usize, amplitude: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..8)
        .map(|_| {
            let freq = rng.random_range(1.5..9.0) * 2.0 * PI / size as f64;
            let dir = rng.random_range(0.0..2.0 * PI);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let s: f64 = waves
                .iter()
                .map(|&(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum();
            out[y * size + x] = amplitude * s / (waves.len() as f64).sqrt();
        }
    }
    out
}

/// Renders one sample; a pure function of the configuration.
pub fn generate_sample(cfg: &SynthConfig) -> Result<SegSample> {
    cfg.validate()?;
    if cfg.task == Task::Shapes {
        return super::shapes::shapes_sample(cfg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let s = n as f64;
    let centre = (s / 2.0, s / 2.0);
    let field_r = FIELD_RADIUS * s;

    let tint = [
        rng.random_range(0.72..0.85),
        rng.random_range(0.30..0.40),
        rng.random_range(0.14..0.22),
    ];
    let tex = texture(&mut rng, n, cfg.texture_amplitude);
    let mut canvas = Canvas {
        size: n,
        rgb: vec![[0.0; 3]; n * n],
    };
    let mut field = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((px - centre.0).powi(2) + (py - centre.1).powi(2)).sqrt();
            let alpha = (field_r - d + 0.5).clamp(0.0, 1.0);
            let shade = (1.0 - 0.35 * (d / field_r).powi(2)) * (1.0 + tex[y * n + x]);
            let i = canvas.idx(x, y);
            field[i] = alpha;
            for c in 0..3 {
                canvas.rgb[i][c] = alpha * tint[c] * shade;
            }
        }
    }

    // Optic disc, off-centre to one side.
    let (r_lo, r_hi) = cfg.disc_radius;
    let radius = rng.random_range(r_lo..=r_hi) * s;
    let aspect: f64 = rng.random_range(0.85..1.15);
    let (a, b) = (radius * aspect.sqrt(), radius / aspect.sqrt());
    let reach = field_r - a.max(b) - 0.02 * s;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let dx = side * rng.random_range(0.1..0.25f64).min(reach / s).max(0.0) * s;
    let dy = rng.random_range(-0.06..0.06f64) * s;
    let limit = (reach.max(0.0) / (dx * dx + dy * dy).sqrt().max(1e-9)).min(1.0);
    let disc = Ellipse {
        cx: centre.0 + dx * limit,
        cy: centre.1 + dy * limit,
        a,
        b,
        angle: rng.random_range(0.0..PI),
    };
    let disc_gain = match cfg.task {
        Task::Disc => 1.0,
        _ => 0.6,
    };
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let sd = disc.signed_distance(px, py);
            let cover = (0.5 - sd).clamp(0.0, 1.0);
            if cover > 0.0 {
                let depth = (-sd / disc.a.min(disc.b)).clamp(0.0, 1.0);
                let glow = disc_gain * cover * (0.25 + 0.2 * depth);
                let i = canvas.idx(x, y);
                canvas.rgb[i][0] += glow;
                canvas.rgb[i][1] += glow * 1.3;
                canvas.rgb[i][2] += glow * 0.7;
            }
        }
    }

    // Vessel trees from the disc: one towards the top, one towards the bottom.
    let (width_scale, depth) = match cfg.task {
        Task::Disc => (0.5, cfg.depth.min(4)),
        _ => (1.0, cfg.depth),
    };
    let params = TreeParams {
        depth,
        width_decay: cfg.width_decay,
        min_width: cfg.min_width_px * width_scale,
    };
    let mut layer = StrokeLayer {
        size: n,
        cover: vec![0.0; n * n],
    };
    // Arcades sweep towards the field centre, one upwards and one downwards.
    let toward = if disc.cx > centre.0 { -1.0 } else { 1.0 };
    for vertical in [-1.0, 1.0] {
        let phi: f64 = rng.random_range(0.9..1.3);
        let trunk_angle = (vertical * phi.sin()).atan2(toward * phi.cos());
        let length = rng.random_range(0.2..0.26) * s;
        grow(
            &mut layer,
            &mut rng,
            &params,
            (disc.cx, disc.cy),
            trunk_angle,
            length,
            cfg.trunk_width * s * width_scale,
            0,
        );
    }
    let darkness = rng.random_range(0.45..0.6);
    for (i, px) in canvas.rgb.iter_mut().enumerate() {
        let c = layer.cover[i] * field[i];
        let k = 1.0 - darkness * c;
        px[0] *= k;
        px[1] *= 1.0 - 0.8 * darkness * c;
        px[2] *= k;
    }

    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let mut image = vec![0.0f32; 3 * n * n];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for c in 0..3 {
            image[c * n * n + i] = (px[c] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let mask: Vec<f32> = match cfg.task {
        Task::Vessel | Task::Shapes => layer
            .cover
            .iter()
            .zip(&field)
            .map(|(&c, &f)| if c * f >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
        Task::Disc => (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                if disc.contains(x, y) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let mut image = Tensor::new(&[3, n, n], image)?;
    normalize(&mut image);
    Ok(SegSample {
        image,
        mask: Tensor::new(&[n, n], mask)?,
        task: cfg.task,
        source_id: format!("synth-{}-{:016x}", cfg.task, cfg.seed),
    })
}

/// `count` samples whose seeds derive from `cfg.seed` and the sample index.
pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<SegSample>> {
    (0..count)
        .map(|i| {
            let c = SynthConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            let mut s = generate_sample(&c)?;
            s.source_id = format!("synth-{}-{i:04}", cfg.task);
            Ok(s)
        })
        .collect()
}
