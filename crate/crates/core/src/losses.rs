//! Segmentation losses on probabilities: BCE, soft Dice, focal Tversky and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

/// Smoothing constant shared by Dice and Tversky, in numerator and denominator.
pub const EPS: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TverskyParams {
    /// False-negative weight.
    pub alpha: f64,
    /// False-positive weight.
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
        }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "Tversky alpha + beta must equal 1, got {} + {}",
                self.alpha, self.beta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("Tversky gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeWeights {
    pub bce: f64,
    pub dice: f64,
    pub ftl: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

impl CompositeWeights {
    pub const fn new(bce: f64, dice: f64, ftl: f64) -> Self {
        Self { bce, dice, ftl }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("bce", self.bce), ("dice", self.dice), ("ftl", self.ftl)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be non-negative")));
            }
        }
        Ok(())
    }
}

fn check_shapes<T: Scalar>(tape: &Tape<T>, op: &'static str, p: Var, t: Var) -> Result<()> {
    if tape.shape(p) != tape.shape(t) {
        return Err(Error::shape(op, tape.shape(p), tape.shape(t)));
    }
    Ok(())
}

/// Mean of `-[t ln p + (1 - t) ln(1 - p)]`.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, target: Var) -> Result<Var> {
    check_shapes(tape, "bce_loss", probs, target)?;
    let p = tape.clamp(probs, T::lit(BCE_CLAMP), T::lit(1.0 - BCE_CLAMP));
    let log_p = tape.ln(p);
    let q = tape.rsub_scalar(T::one(), p);
    let log_q = tape.ln(q);
    let not_t = tape.rsub_scalar(T::one(), target);
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(not_t, log_q)?;
    let ll = tape.add(pos, neg)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -T::one()))
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn soft_dice_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, target: Var) -> Result<Var> {
    check_shapes(tape, "soft_dice_loss", probs, target)?;
    let pt = tape.mul(probs, target)?;
    let inter = tape.sum(pt);
    let num = tape.scale(inter, T::lit(2.0));
    let num = tape.add_scalar(num, T::lit(EPS));
    let sp = tape.sum(probs);
    let st = tape.sum(target);
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, T::lit(EPS));
    let ratio = tape.div(num, den)?;
    Ok(tape.rsub_scalar(T::one(), ratio))
}

/// `(1 - TI)^gamma` with the Tversky index
/// `TI = (TP + eps) / (TP + alpha FN + beta FP + eps)`.
pub fn focal_tversky_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: Var,
    params: &TverskyParams,
) -> Result<Var> {
    check_shapes(tape, "focal_tversky_loss", probs, target)?;
    params.validate()?;
    let pt = tape.mul(probs, target)?;
    let tp = tape.sum(pt);
    let not_p = tape.rsub_scalar(T::one(), probs);
    let fn_map = tape.mul(not_p, target)?;
    let fn_sum = tape.sum(fn_map);
    let not_t = tape.rsub_scalar(T::one(), target);
    let fp_map = tape.mul(probs, not_t)?;
    let fp_sum = tape.sum(fp_map);

    let num = tape.add_scalar(tp, T::lit(EPS));
    let fn_w = tape.scale(fn_sum, T::lit(params.alpha));
    let fp_w = tape.scale(fp_sum, T::lit(params.beta));
    let den = tape.add(num, fn_w)?;
    let den = tape.add(den, fp_w)?;
    let ti = tape.div(num, den)?;
    let gap = tape.rsub_scalar(T::one(), ti);
    // Rounding can push 1 - TI a hair below zero, where powf is undefined.
    let gap = tape.clamp(gap, T::zero(), T::one());
    Ok(tape.powf(gap, T::lit(params.gamma)))
}

/// Per-term values of a composite loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub ftl: f64,
}

/// `w_bce BCE + w_dice Dice + w_ftl FTL`; returns the total on the tape and
/// the individual terms.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: Var,
    weights: &CompositeWeights,
    tversky: &TverskyParams,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let bce = bce_loss(tape, probs, target)?;
    let dice = soft_dice_loss(tape, probs, target)?;
    let ftl = focal_tversky_loss(tape, probs, target, tversky)?;
    let a = tape.scale(bce, T::lit(weights.bce));
    let b = tape.scale(dice, T::lit(weights.dice));
    let c = tape.scale(ftl, T::lit(weights.ftl));
    let total = tape.add(a, b)?;
    let total = tape.add(total, c)?;
    let read = |v: Var| tape.value(v)[0].as_f64();
    let breakdown = LossBreakdown {
        total: read(total),
        bce: read(bce),
        dice: read(dice),
        ftl: read(ftl),
    };
    Ok((total, breakdown))
}
