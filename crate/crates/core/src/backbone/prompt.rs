//! Point and box prompts, and their encoding as decoder tokens.

use serde::{Deserialize, Serialize};

use super::layers::Builder;
use super::params::{Ctx, ParamId};
use super::posenc;
use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::scalar::Scalar;

/// Pixel-coordinate prompts. Points are `(x, y)`, boxes `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub positive_points: Vec<(f64, f64)>,
    pub negative_points: Vec<(f64, f64)>,
    pub boxes: Vec<(f64, f64, f64, f64)>,
}

impl PromptSet {
    pub fn is_empty(&self) -> bool {
        self.positive_points.is_empty() && self.negative_points.is_empty() && self.boxes.is_empty()
    }

    /// Tokens produced by the encoder: one per point, two per box, or the
    /// single no-prompt token when empty.
    pub fn token_count(&self) -> usize {
        if self.is_empty() {
            1
        } else {
            self.positive_points.len() + self.negative_points.len() + 2 * self.boxes.len()
        }
    }

    /// Prompts are indexed positives first, then negatives, then boxes.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        let inside = |x: f64, y: f64| x.is_finite() && y.is_finite() && (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
        let points = self.positive_points.iter().chain(&self.negative_points);
        for (index, &(x, y)) in points.enumerate() {
            if !inside(x, y) {
                return Err(Error::InvalidPrompt {
                    index,
                    reason: format!("point ({x}, {y}) outside {width}x{height}"),
                });
            }
        }
        let offset = self.positive_points.len() + self.negative_points.len();
        for (i, &(x0, y0, x1, y1)) in self.boxes.iter().enumerate() {
            let index = offset + i;
            if !inside(x0, y0) || !inside(x1, y1) {
                return Err(Error::InvalidPrompt {
                    index,
                    reason: format!("box ({x0}, {y0}, {x1}, {y1}) outside {width}x{height}"),
                });
            }
            if x0 >= x1 || y0 >= y1 {
                return Err(Error::InvalidPrompt {
                    index,
                    reason: format!("box ({x0}, {y0}, {x1}, {y1}) has non-positive extent"),
                });
            }
        }
        Ok(())
    }
}

/// Prompt tokens `[n, token_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct PromptTokens {
    pub tokens: Var,
    pub count: usize,
}

// Rows of `PromptEncoder::type_embed`.
const NEGATIVE: usize = 0;
const POSITIVE: usize = 1;
const BOX_TOP_LEFT: usize = 2;
const BOX_BOTTOM_RIGHT: usize = 3;

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub type_embed: ParamId,
    pub no_prompt: ParamId,
    pub dim: usize,
}

impl PromptEncoder {
    pub(crate) fn new<T: Scalar>(b: &mut Builder<T>, dim: usize) -> Self {
        Self {
            type_embed: b.embedding("prompt.type_embed", &[4, dim]),
            no_prompt: b.embedding("prompt.no_prompt", &[1, dim]),
            dim,
        }
    }

    /// Coordinates are normalised by `frame`, the (possibly padded) extent
    /// the image features are laid out on, so point and grid encodings agree.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        prompts: &PromptSet,
        image: (usize, usize),
        frame: (usize, usize),
    ) -> Result<PromptTokens> {
        prompts.validate(image.0, image.1)?;
        if prompts.is_empty() {
            let tokens = ctx.p(self.no_prompt);
            return Ok(PromptTokens { tokens, count: 1 });
        }
        let (fh, fw) = (frame.0 as f64, frame.1 as f64);
        let mut rows = Vec::new();
        let mut kinds = Vec::new();
        for (kind, pts) in [(POSITIVE, &prompts.positive_points), (NEGATIVE, &prompts.negative_points)] {
            for &(x, y) in pts {
                rows.push(((x + 0.5) / fw, (y + 0.5) / fh));
                kinds.push(kind);
            }
        }
        for &(x0, y0, x1, y1) in &prompts.boxes {
            rows.push(((x0 + 0.5) / fw, (y0 + 0.5) / fh));
            kinds.push(BOX_TOP_LEFT);
            rows.push(((x1 + 0.5) / fw, (y1 + 0.5) / fh));
            kinds.push(BOX_BOTTOM_RIGHT);
        }
        let mut pe = Vec::with_capacity(rows.len() * self.dim);
        for &(u, v) in &rows {
            posenc::encode_point(u, v, self.dim / 4, &mut pe);
        }
        let n = rows.len();
        let pe = ctx.tape.constant(&[n, self.dim], pe.into_iter().map(T::lit).collect())?;
        let table = ctx.p(self.type_embed);
        let picked = kinds
            .iter()
            .map(|&k| ctx.tape.narrow(table, 0, k, 1))
            .collect::<Result<Vec<_>>>()?;
        let embed = ctx.tape.concat(&picked, 0)?;
        let tokens = ctx.tape.add(pe, embed)?;
        Ok(PromptTokens { tokens, count: n })
    }
}
