//! Central-finite-difference gradient checking.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub n_coords: usize,
}

/// Compare the tape gradient of a scalar function against central finite
/// differences `(f(x + h e_j) - f(x - h e_j)) / 2h` per coordinate.
/// Relative error per coordinate is `|a - b| / max(1, |a|, |b|)`.
///
/// The function receives its input as a flat 1-D tensor and is responsible
/// for any reshaping. It must be deterministic: stochastic pieces (dropout)
/// have to derive their masks from a seed fixed inside the closure.
pub fn grad_check<F>(f: F, point: &[f64], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if step <= 0.0 || tol <= 0.0 {
        return Err(Error::Validation("grad_check: step and tol must be positive".into()));
    }
    // Analytic gradient via the tape.
    let mut tape = Tape::new();
    let x = tape.leaf(point.to_vec(), vec![point.len()], true)?;
    let y = f(&mut tape, &x)?;
    if y.numel() != 1 {
        return Err(Error::Validation(format!(
            "grad_check: function output must be scalar, got shape {:?}",
            y.shape()
        )));
    }
    tape.backward(&y)?;
    let analytic = tape.grad_required(&x)?.to_vec();

    let eval = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let xt = t.leaf(p.to_vec(), vec![p.len()], false)?;
        f(&mut t, &xt)?.scalar()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut probe = point.to_vec();
    for j in 0..point.len() {
        probe[j] = point[j] + step;
        let fp = eval(&probe)?;
        probe[j] = point[j] - step;
        let fm = eval(&probe)?;
        probe[j] = point[j];
        let numeric = (fp - fm) / (2.0 * step);
        let denom = 1.0f64.max(analytic[j].abs()).max(numeric.abs());
        let rel = (analytic[j] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        n_coords: point.len(),
    })
}
