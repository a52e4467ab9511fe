//! PNG image/mask pairs on disk.
//!
//! Two layouts are read. Pre-split data lives in `<root>/<split>/images` and
//! `<root>/<split>/masks`. A flat pool in `<root>/images` and `<root>/masks`
//! is split by `<root>/split.txt` (one test stem per line) when present, and
//! otherwise by a seeded 75/25 shuffle.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, SegSample, Task};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Seed of the fallback 75/25 split.
pub const SPLIT_SEED: u64 = 25;
pub const TEST_FRACTION: f64 = 0.25;
/// Mask pixels above this grey level are foreground.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

/// Samples of one split, plus what was skipped on the way.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub samples: Vec<SegSample>,
    /// Stems of images without a mask.
    pub skipped: Vec<String>,
    /// Seed of the random split, when one was drawn.
    pub split_seed: Option<u64>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    let mut t = Tensor::new(&[3, h, w], data)?;
    normalize(&mut t);
    Ok(t)
}

fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[h, w], data)
}

/// Pairs images with masks by stem. Orphan images are skipped with a warning.
fn read_pairs(
    images: &Path,
    masks: &Path,
    keep: impl Fn(&str) -> bool,
    task: Task,
    dataset: &str,
) -> Result<(Vec<SegSample>, Vec<String>)> {
    let imgs = png_stems(images)?;
    let msks = png_stems(masks)?;
    let (mut samples, mut skipped) = (Vec::new(), Vec::new());
    for (stem, img_path) in &imgs {
        if !keep(stem) {
            continue;
        }
        let Some(mask_path) = msks.get(stem) else {
            log::warn!("{}: no mask for image {stem}, skipped", images.display());
            skipped.push(stem.clone());
            continue;
        };
        let sample = SegSample {
            image: read_image(img_path)?,
            mask: read_mask(mask_path)?,
            task,
            source_id: format!("{dataset}/{stem}"),
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok((samples, skipped))
}

/// Stems sent to the test split by the seeded shuffle.
pub fn random_test_stems(stems: &[String], seed: u64) -> HashSet<String> {
    let mut sorted = stems.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_test = (sorted.len() as f64 * TEST_FRACTION).round() as usize;
    sorted.into_iter().take(n_test).collect()
}

/// Loads one split of the dataset at `root`; see the module docs for the
/// accepted layouts.
pub fn load_dataset(root: &Path, split: Split, task: Task) -> Result<LoadedSplit> {
    let dataset = root.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_owned();
    let split_dir = root.join(split.to_string());
    if split_dir.join("images").is_dir() {
        let (samples, skipped) =
            read_pairs(&split_dir.join("images"), &split_dir.join("masks"), |_| true, task, &dataset)?;
        return Ok(LoadedSplit {
            samples,
            skipped,
            split_seed: None,
        });
    }

    let (images, masks) = (root.join("images"), root.join("masks"));
    if !images.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: neither {split}/images nor images/ found", root.display()),
        )));
    }
    let split_file = root.join("split.txt");
    let (test, split_seed) = if split_file.is_file() {
        let listed = fs::read_to_string(&split_file)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        (listed, None)
    } else {
        // Only paired stems take part, so orphans cannot shift the split.
        let msks = png_stems(&masks)?;
        let paired: Vec<String> = png_stems(&images)?.into_keys().filter(|s| msks.contains_key(s)).collect();
        (random_test_stems(&paired, SPLIT_SEED), Some(SPLIT_SEED))
    };
    let want_test = split == Split::Test;
    let (samples, skipped) = read_pairs(&images, &masks, |s| test.contains(s) == want_test, task, &dataset)?;
    Ok(LoadedSplit {
        samples,
        skipped,
        split_seed,
    })
}

/// Image as 8-bit RGB, rescaled per channel to the full range.
pub fn image_to_rgb(image: &Tensor<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let planes: Vec<(&[f32], f32, f32)> = image
        .data()
        .chunks_exact(h * w)
        .map(|ch| {
            let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (ch, lo, (hi - lo).max(1e-12))
        })
        .collect();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            let (ch, lo, span) = planes[c];
            ((ch[i] - lo) / span * 255.0).round() as u8
        }))
    })
}

pub fn mask_to_gray(mask: &Tensor<f32>) -> GrayImage {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.data()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    })
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// Writes samples as `<root>/<split>/{images,masks}/<stem>.png`, with stems
/// `00000`, `00001`, ...
pub fn write_dataset(root: &Path, split: Split, samples: &[SegSample]) -> Result<()> {
    write_pairs(&root.join(split.to_string()), samples)
}

/// Writes samples as `<dir>/{images,masks}/<stem>.png`; a pool in this form
/// is split by `load_dataset`.
pub fn write_pairs(dir: &Path, samples: &[SegSample]) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        let rgb = image_to_rgb(&s.image);
        save(|p| rgb.save(p), &images.join(&name))?;
        let gray = mask_to_gray(&s.mask);
        save(|p| gray.save(p), &masks.join(&name))?;
    }
    Ok(())
}
