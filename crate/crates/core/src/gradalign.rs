//! Per-objective gradient extraction, gradient-angle computation, the
//! angle-threshold gate, and angle-histogram aggregation.
//!
//! A step under the gate runs two backward passes over the same forward
//! activations (one per objective), measures the angle between the two
//! flattened gradients, and recombines them as
//! `(1 - lambda') * g_base + lambda' * g_contrastive`. When the gate fires
//! (angle above threshold), lambda' = 0 and the final gradient is the base
//! gradient verbatim, so a gated step is arithmetically identical to a step
//! that never computed the contrastive objective.

use crate::error::{Error, Result};
use crate::model::{Bound, ParamSet, Scope};
use crate::records::{AngleRecord, HistogramSummary};
use crate::tensor::{Tape, Tensor};

/// Norms below this count as a vanished gradient: the angle is undefined
/// and the gate is skipped.
const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Outcome of one two-objective gradient measurement.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub g_ce: Vec<f64>,
    pub g_acl: Vec<f64>,
    /// None when either gradient vanished (degenerate batch).
    pub cos_gamma: Option<f64>,
    pub gamma_deg: Option<f64>,
    pub gated: bool,
    pub lambda_prime: f64,
    pub param_scope: String,
}

/// Concatenate the gradients of every in-scope parameter, in registration
/// order. Missing gradients are an error.
pub fn flatten_grads(
    params: &ParamSet,
    tape: &Tape,
    bound: &Bound,
    scope: Scope,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.total_elems(scope));
    for (pid, p) in params.iter() {
        if !scope.contains(p.owner) {
            continue;
        }
        let t = bound
            .try_get(pid)
            .ok_or_else(|| Error::Tape(format!("parameter {} not bound", p.name)))?;
        let g = tape
            .grad(t)
            .ok_or_else(|| Error::Tape(format!("missing gradient for {}", p.name)))?;
        out.extend_from_slice(g);
    }
    Ok(out)
}

/// Like `flatten_grads`, but a parameter the objective does not touch
/// contributes zeros (its true gradient).
fn flatten_grads_or_zero(
    params: &ParamSet,
    tape: &Tape,
    bound: &Bound,
    scope: Scope,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.total_elems(scope));
    for (pid, p) in params.iter() {
        if !scope.contains(p.owner) {
            continue;
        }
        let t = bound
            .try_get(pid)
            .ok_or_else(|| Error::Tape(format!("parameter {} not bound", p.name)))?;
        match tape.grad(t) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(p.numel())),
        }
    }
    Ok(out)
}

/// cos gamma = a.b / (|a||b|) clamped to [-1, 1], and gamma in degrees.
pub fn grad_angle(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "grad_angle: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < GRAD_NORM_FLOOR || nb < GRAD_NORM_FLOOR {
        return Err(Error::ZeroNorm(format!(
            "grad_angle: norms {na:e}, {nb:e}"
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok((cos, cos.acos().to_degrees()))
}

/// lambda' = lambda when gamma <= gamma_thres (non-strict), else 0.
pub fn acl_grad_gate(gamma_deg: f64, lambda: f64, gamma_thres: f64) -> f64 {
    if gamma_deg <= gamma_thres {
        lambda
    } else {
        0.0
    }
}

/// Final per-parameter gradients plus the measurement report.
pub struct GatedStep {
    pub report: GradReport,
    /// Indexed like the ParamSet; None for parameters outside the scope.
    pub final_grads: Vec<Option<Vec<f64>>>,
    pub bundle: crate::losses::LossBundle,
}

/// Run both backward passes over an already-built forward graph, measure
/// the gradient angle over `scope`, apply the gate, and recombine.
///
/// The base objective must have been recorded on the tape before the
/// contrastive one, so its backward sweep touches an identical node prefix
/// whether or not the contrastive branch exists.
#[allow(clippy::too_many_arguments)]
pub fn gated_step_grads(
    params: &ParamSet,
    tape: &mut Tape,
    bound: &Bound,
    base_loss: &Tensor,
    contrastive_loss: Option<&Tensor>,
    lambda: f64,
    gamma_thres: f64,
    scope: Scope,
    gate_enabled: bool,
) -> Result<GatedStep> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("lambda {lambda} outside [0, 1]")));
    }
    tape.backward(base_loss)?;
    let mut g_ce_per: Vec<Option<Vec<f64>>> = Vec::with_capacity(params.len());
    for (pid, p) in params.iter() {
        if scope.contains(p.owner) {
            let t = bound
                .try_get(pid)
                .ok_or_else(|| Error::Tape(format!("parameter {} not bound", p.name)))?;
            g_ce_per.push(Some(tape.grad_required(t)?.to_vec()));
        } else {
            g_ce_per.push(None);
        }
    }
    let g_ce = flatten_grads(params, tape, bound, scope)?;

    let contrastive_value = match contrastive_loss {
        Some(t) => t.scalar()?,
        None => 0.0,
    };

    // No contrastive branch: behave exactly like a plain base step.
    let Some(closs) = contrastive_loss else {
        let bundle = crate::losses::combine(base_loss.scalar()?, 0.0, 0.0)?;
        let report = GradReport {
            g_acl: vec![0.0; g_ce.len()],
            g_ce,
            cos_gamma: None,
            gamma_deg: None,
            gated: false,
            lambda_prime: 0.0,
            param_scope: scope.label(),
        };
        return Ok(GatedStep {
            final_grads: g_ce_per,
            report,
            bundle,
        });
    };

    tape.reset_grads();
    tape.backward(closs)?;
    let g_acl = flatten_grads_or_zero(params, tape, bound, scope)?;
    let acl_norm = g_acl.iter().map(|v| v * v).sum::<f64>().sqrt();

    // Degenerate contrastive gradient: angle undefined, never gate.
    let (cos_gamma, gamma_deg) = if acl_norm < GRAD_NORM_FLOOR {
        (None, None)
    } else {
        let (c, d) = grad_angle(&g_ce, &g_acl)?;
        (Some(c), Some(d))
    };
    // The gate is a property of the measured angle alone; lambda' follows.
    let gated = match (gate_enabled, gamma_deg) {
        (true, Some(deg)) => deg > gamma_thres,
        _ => false,
    };
    let lambda_prime = if gated { 0.0 } else { lambda };

    let mut final_grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(params.len());
    for (pid, p) in params.iter() {
        if !scope.contains(p.owner) {
            final_grads.push(None);
            continue;
        }
        let n = p.numel();
        let ce = g_ce_per[final_grads.len()]
            .as_ref()
            .expect("in-scope parameter recorded above");
        let grad = if lambda_prime == 0.0 {
            ce.clone()
        } else {
            let t = bound.try_get(pid).expect("bound checked above");
            let acl_slice: Vec<f64> = match tape.grad(t) {
                Some(g) => g.to_vec(),
                None => vec![0.0; n],
            };
            if lambda_prime == 1.0 {
                acl_slice
            } else {
                ce.iter()
                    .zip(&acl_slice)
                    .map(|(&c, &a)| (1.0 - lambda_prime) * c + lambda_prime * a)
                    .collect()
            }
        };
        final_grads.push(Some(grad));
    }

    let bundle = crate::losses::combine(base_loss.scalar()?, contrastive_value, lambda_prime)?;
    Ok(GatedStep {
        report: GradReport {
            g_ce,
            g_acl,
            cos_gamma,
            gamma_deg,
            gated,
            lambda_prime,
            param_scope: scope.label(),
        },
        final_grads,
        bundle,
    })
}

/// Fixed-width histogram over [0, 180] degrees. Records without an angle
/// (degenerate batches) count toward the total and the gated fraction but
/// not toward the bins or the angle statistics.
pub fn angle_histogram(records: &[AngleRecord], n_bins: usize) -> Result<HistogramSummary> {
    if records.is_empty() {
        return Err(Error::Validation("angle_histogram: empty record stream".into()));
    }
    if n_bins == 0 {
        return Err(Error::Validation("angle_histogram: need at least one bin".into()));
    }
    let width = 180.0 / n_bins as f64;
    let mut bins = vec![0u64; n_bins];
    let mut angles = Vec::new();
    let mut gated = 0usize;
    for r in records {
        if r.gated {
            gated += 1;
        }
        if let Some(deg) = r.gamma_deg {
            if !(0.0..=180.0).contains(&deg) {
                return Err(Error::Validation(format!(
                    "angle {deg} outside [0, 180]"
                )));
            }
            let idx = ((deg / width) as usize).min(n_bins - 1);
            bins[idx] += 1;
            angles.push(deg);
        }
    }
    let n_with_angle = angles.len();
    let mean = if n_with_angle == 0 {
        0.0
    } else {
        angles.iter().sum::<f64>() / n_with_angle as f64
    };
    let std = if n_with_angle == 0 {
        0.0
    } else {
        (angles.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n_with_angle as f64).sqrt()
    };
    Ok(HistogramSummary {
        bins,
        bin_width_deg: width,
        mean_deg: mean,
        std_deg: std,
        fraction_gated: gated as f64 / records.len() as f64,
        n_records: records.len(),
        n_with_angle,
    })
}

/// Default histogram geometry: 36 bins of 5 degrees.
pub const DEFAULT_ANGLE_BINS: usize = 36;
