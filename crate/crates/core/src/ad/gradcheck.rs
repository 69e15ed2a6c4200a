//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max over coordinates of `|AD - FD| / (|AD| + 1e-8)`, where `FD` is the
/// central difference `(f(x + h e) - f(x - h e)) / 2h`.
///
/// `f` must build a scalar on the tape from the given input leaf.
pub fn check_gradients<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..input.len()).collect();
    check_gradients_at(f, input, h, &all)
}

/// Same as [`check_gradients`], restricted to the listed coordinates.
pub fn check_gradients_at<F>(f: F, input: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let ad = analytic_gradient(&f, input)?;
    let mut worst = 0.0_f64;
    for &i in coords {
        let fd = central_difference(&f, input, i, h)?;
        let a = ad.data()[i];
        worst = worst.max((a - fd).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

pub fn analytic_gradient<F>(f: &F, input: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let y = f(&mut tape, x)?;
    let mut grads = tape.backward(y)?;
    grads.take(x).ok_or_else(|| Error::Contract("input leaf received no gradient".into()))
}

pub fn central_difference<F>(f: &F, input: &Tensor, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut x = input.clone();
        x.data_mut()[i] += delta;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = f(&mut tape, xv)?;
        Ok(tape.value(y).item())
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}
