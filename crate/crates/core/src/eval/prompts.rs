//! The seven evaluation prompting scenarios and their samplers.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PromptSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Box edges move by up to this fraction of the box side.
pub const BOX_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PromptMode {
    /// No prompt.
    Eval0,
    /// One positive point.
    Eval1,
    /// Two positive points.
    Eval2,
    /// Five positive points.
    Eval3,
    /// Five positive points and one negative.
    Eval4,
    /// One box.
    Eval5,
    /// Five positive points and one box.
    Eval6,
}

impl PromptMode {
    pub const ALL: [PromptMode; 7] = [
        PromptMode::Eval0,
        PromptMode::Eval1,
        PromptMode::Eval2,
        PromptMode::Eval3,
        PromptMode::Eval4,
        PromptMode::Eval5,
        PromptMode::Eval6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(positive points, negative points, boxes)`.
    pub fn counts(self) -> (usize, usize, usize) {
        match self {
            PromptMode::Eval0 => (0, 0, 0),
            PromptMode::Eval1 => (1, 0, 0),
            PromptMode::Eval2 => (2, 0, 0),
            PromptMode::Eval3 => (5, 0, 0),
            PromptMode::Eval4 => (5, 1, 0),
            PromptMode::Eval5 => (0, 0, 1),
            PromptMode::Eval6 => (5, 0, 1),
        }
    }

    pub fn needs_foreground(self) -> bool {
        self != PromptMode::Eval0
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "eval-{}", self.index())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("eval-")
            .and_then(|d| d.parse::<usize>().ok())
            .and_then(|i| PromptMode::ALL.get(i).copied())
            .ok_or_else(|| Error::Config(format!("unknown prompt mode {s:?} (expected eval-0 .. eval-6)")))
    }
}

impl From<PromptMode> for String {
    fn from(m: PromptMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for PromptMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Tight box around the foreground in pixel-edge coordinates
/// `(x0, y0, x1, y1)`, or `None` for an empty mask.
pub fn tight_box(mask: &Tensor<f32>) -> Option<(f64, f64, f64, f64)> {
    let w = mask.shape()[1];
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &v)| v > 0.5) {
        let (y, x) = (i / w, i % w);
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b.map(|(x0, y0, x1, y1)| (x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

/// Distinct pixels drawn uniformly from `pool`; repeats only if the pool is
/// smaller than `n`.
fn draw<R: Rng>(pool: &[usize], n: usize, w: usize, rng: &mut R) -> Vec<(f64, f64)> {
    let picks: Vec<usize> = if pool.len() >= n {
        sample_indices(rng, pool.len(), n).into_iter().collect()
    } else {
        (0..n).map(|_| rng.random_range(0..pool.len())).collect()
    };
    picks.into_iter().map(|i| ((pool[i] % w) as f64, (pool[i] / w) as f64)).collect()
}

/// Prompts for `mask` under `mode`: points uniform over the matching
/// region, the box jittered by up to 5% of its sides. Pure in `seed`.
pub fn sample_prompts(mask: &Tensor<f32>, mode: PromptMode, seed: u64) -> Result<PromptSet> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (n_pos, n_neg, n_box) = mode.counts();
    if mode == PromptMode::Eval0 {
        return Ok(PromptSet::default());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..h * w).partition(|&i| mask.data()[i] > 0.5);
    if fg.is_empty() {
        return Err(Error::EmptyMask(mode.to_string()));
    }
    if n_neg > 0 && bg.is_empty() {
        return Err(Error::EmptyMask(format!("{mode} (no background)")));
    }
    let mut prompts = PromptSet {
        positive_points: draw(&fg, n_pos, w, &mut rng),
        negative_points: draw(&bg, n_neg, w, &mut rng),
        boxes: Vec::new(),
    };
    if n_box > 0 {
        let (x0, y0, x1, y1) = tight_box(mask).expect("foreground is non-empty");
        let (bw, bh) = (x1 - x0, y1 - y0);
        let mut j = |side: f64| rng.random_range(-BOX_JITTER..=BOX_JITTER) * side;
        let (mut a0, mut b0) = ((x0 + j(bw)).clamp(0.0, w as f64), (y0 + j(bh)).clamp(0.0, h as f64));
        let (mut a1, mut b1) = ((x1 + j(bw)).clamp(0.0, w as f64), (y1 + j(bh)).clamp(0.0, h as f64));
        // Jitter never inverts a box: at least one pixel survives.
        if a1 - a0 < 1.0 {
            (a0, a1) = (x0, x1);
        }
        if b1 - b0 < 1.0 {
            (b0, b1) = (y0, y1);
        }
        prompts.boxes.push((a0, b0, a1, b1));
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in PromptMode::ALL {
            assert_eq!(m.to_string().parse::<PromptMode>().unwrap(), m);
        }
        assert!("eval-7".parse::<PromptMode>().is_err());
    }

    #[test]
    fn tight_box_of_single_pixel() {
        let mut m = Tensor::<f32>::zeros(&[4, 5]);
        m.data_mut()[2 * 5 + 3] = 1.0;
        assert_eq!(tight_box(&m), Some((3.0, 2.0, 4.0, 3.0)));
    }
}
