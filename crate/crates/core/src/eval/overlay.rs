//! Image with ground-truth and predicted mask outlines.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::io::image_to_rgb;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GT_COLOR: [u8; 3] = [0, 255, 0];
pub const PRED_COLOR: [u8; 3] = [255, 0, 255];

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn contour(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Ground truth outlined in green, the thresholded prediction in magenta.
pub fn render_overlay(image: &Tensor<f32>, target: &Tensor<f32>, probs: &Tensor<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut rgb = image_to_rgb(image);
    let gt: Vec<bool> = target.data().iter().map(|&v| v > 0.5).collect();
    let pred: Vec<bool> = probs.data().iter().map(|&v| v > 0.5).collect();
    for (mask, color) in [(gt, GT_COLOR), (pred, PRED_COLOR)] {
        for (i, on) in contour(&mask, h, w).into_iter().enumerate() {
            if on {
                rgb.put_pixel((i % w) as u32, (i / w) as u32, Rgb(color));
            }
        }
    }
    rgb
}

pub fn save_overlay(path: &Path, image: &Tensor<f32>, target: &Tensor<f32>, probs: &Tensor<f32>) -> Result<()> {
    render_overlay(image, target, probs).save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}
