//! Samples, the synthetic fundus generator, PNG loading and augmentation.

pub mod augment;
pub mod io;
pub mod shapes;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use augment::{augment, AugmentConfig, Interp, Warp};
pub use io::{load_dataset, write_dataset, write_pairs, LoadedSplit, Split};
pub use synth::{generate_dataset, generate_sample, SynthConfig};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vessel,
    Disc,
    /// Generic strokes and blobs, the pretraining corpus of the base network.
    Shapes,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Vessel => "vessel",
            Task::Disc => "disc",
            Task::Shapes => "shapes",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vessel" => Ok(Task::Vessel),
            "disc" => Ok(Task::Disc),
            "shapes" => Ok(Task::Shapes),
            other => Err(Error::Config(format!("unknown task {other:?} (expected vessel, disc or shapes)"))),
        }
    }
}

/// Normalised image `[3, H, W]` and binary mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub task: Task,
    pub source_id: String,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.data().iter().filter(|&&v| v > 0.5).count();
        fg as f64 / self.mask.numel() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = *self.image.shape() else {
            return Err(Error::invalid("sample", format!("image shape {:?}", self.image.shape())));
        };
        if c != 3 || self.mask.shape() != [h, w] {
            return Err(Error::shape("sample", self.image.shape(), self.mask.shape()));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid("sample", format!("{h}x{w} is below the {MIN_SIDE}px minimum")));
        }
        if !self.image.is_finite() {
            return Err(Error::invalid("sample", format!("{}: non-finite pixels", self.source_id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("sample", format!("{}: mask is not binary", self.source_id)));
        }
        Ok(())
    }
}

/// Per-channel zero mean and unit variance, in place. Constant channels are
/// only centred.
pub fn normalize(image: &mut Tensor<f32>) {
    let c = image.shape()[0];
    let plane = image.numel() / c.max(1);
    for ch in image.data_mut().chunks_exact_mut(plane) {
        let n = plane as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        ch.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
    }
}

/// Seed for item `index` of a collection seeded with `seed`; independent of
/// the order in which items are produced.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_gives_zero_mean_unit_variance() {
        let data: Vec<f32> = (0..3 * 64).map(|i| ((i * 37) % 11) as f32 * 0.1 + 2.0).collect();
        let mut t = Tensor::new(&[3, 8, 8], data).unwrap();
        normalize(&mut t);
        for ch in t.data().chunks(64) {
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "{mean}");
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }
}
