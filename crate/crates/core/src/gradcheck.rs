//! Finite-difference validation of reverse-mode gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor: entries whose analytic and numeric gradients are both
/// below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Maximum relative error between reverse-mode gradients of `f` at `points`
/// and central finite differences with step [`FD_STEP`].
///
/// `f` receives one trainable [`Var`] per point and must return a scalar.
pub fn grad_check_many<F>(f: F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; points[pi].len()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient {a}")));
            }
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point))
}
