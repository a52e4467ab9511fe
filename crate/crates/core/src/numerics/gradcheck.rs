//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` records a scalar-valued function of its input on the given tape.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradient_check_at(f, x, h, &coords)
}

/// Same as [`gradient_check`], restricted to the listed flat coordinates.
pub fn gradient_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = (eval(&f, x, i, h)? - eval(&f, x, i, -h)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn analytic_grad<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(Error::NonScalarOutput(tape.shape(y).to_vec()));
    }
    tape.backward(y)?;
    Ok(tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]))
}

fn eval<F>(f: &F, x: &Tensor<f64>, coord: usize, delta: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut shifted = x.clone().with_requires_grad(false);
    shifted.data_mut()[coord] += delta;
    let mut tape = Tape::new();
    let xv = tape.leaf(&shifted);
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(Error::NonScalarOutput(tape.shape(y).to_vec()));
    }
    Ok(tape.value(y)[0])
}
