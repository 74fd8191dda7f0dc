//! Central-difference gradient verification.

use super::backward::{backward, forward_loss, GradientSet};
use crate::error::Result;
use crate::net::{forward_trace, ms_forward_trace, ActTrace, Model};
use crate::tensor::Tensor;

/// Signs of every ReLU input, gate hidden unit and loss residual. Two
/// parameter vectors with the same signature lie on the same smooth piece.
fn kink_signature(m: &Model, y: &Tensor, gt: &Tensor) -> Result<Vec<bool>> {
    let mut sig = Vec::new();
    let mut push = |t: &Tensor, off: &dyn Fn(usize) -> f64| {
        let plane = t.plane().max(1);
        sig.extend(t.data().iter().enumerate().map(|(i, v)| *v - off(i / plane) > 0.0));
    };
    let act = |a: &ActTrace, theta: &[f64], push: &mut dyn FnMut(&Tensor, &dyn Fn(usize) -> f64)| {
        push(&a.pre, &|c| theta[c]);
        for g in [&a.gate_wt, &a.gate_w].into_iter().flatten() {
            let h = Tensor::from_vec(g.hidden_pre.len(), 1, 1, g.hidden_pre.clone())
                .expect("vector shape");
            push(&h, &|_| 0.0);
        }
    };
    let zero = |_: usize| 0.0;
    match m {
        Model::Code(p) => {
            let tr = forward_trace(y, p)?;
            push(&tr.a1, &zero);
            push(&tr.a2, &zero);
            for it in &tr.iters {
                act(&it.act, &p.theta, &mut push);
            }
            push(&tr.q, &zero);
            push(&tr.prediction(p.toggles.grl)?.sub(gt)?, &zero);
            push(&gt.sub(&tr.prediction(p.toggles.grl)?)?, &zero);
        }
        Model::MultiScale(p) => {
            let tr = ms_forward_trace(y, p)?;
            push(&tr.a1, &zero);
            push(&tr.a2, &zero);
            for (t, it) in tr.iters.iter().enumerate() {
                for (j, a) in it.acts.iter().enumerate() {
                    act(a, p.theta_at(j, t), &mut push);
                }
            }
            push(&tr.q, &zero);
            push(&tr.prediction(p.toggles.grl)?.sub(gt)?, &zero);
            push(&gt.sub(&tr.prediction(p.toggles.grl)?)?, &zero);
        }
    }
    Ok(sig)
}

fn perturbed(m: &Model, index: usize, offset: usize, delta: f64) -> Model {
    let mut out = m.clone();
    let mut params = out.params_mut();
    params[index].1[offset] += delta;
    drop(params);
    out
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Parameter name and coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Gradients smaller than this fraction of the largest analytic entry are
/// compared against that floor instead of their own magnitude, since central
/// differences carry roundoff of roughly `1e-12` at `eps = 1e-4`.
pub const FD_NOISE_FLOOR: f64 = 1e-4;

/// Compares `g` against central differences of the loss, coordinate by
/// coordinate. Coordinates within `10 eps` of a kink are skipped.
pub fn finite_diff_report(m: &Model, y: &Tensor, gt: &Tensor, g: &GradientSet, eps: f64) -> Result<FdReport> {
    let names: Vec<(String, usize)> = m
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.data.len()))
        .collect();
    let grads = g.entries();
    let base_sig = kink_signature(m, y, gt)?;
    let largest = grads
        .iter()
        .flat_map(|p| p.data.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = (FD_NOISE_FLOOR * largest).max(1e-12);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (idx, (name, len)) in names.iter().enumerate() {
        for off in 0..*len {
            let far_plus = perturbed(m, idx, off, 10.0 * eps);
            let far_minus = perturbed(m, idx, off, -10.0 * eps);
            if kink_signature(&far_plus, y, gt)? != base_sig
                || kink_signature(&far_minus, y, gt)? != base_sig
            {
                report.skipped += 1;
                continue;
            }
            let lp = forward_loss(&perturbed(m, idx, off, eps), y, gt)?;
            let lm = forward_loss(&perturbed(m, idx, off, -eps), y, gt)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[idx].data[off];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), off));
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between [`backward`] and central differences.
pub fn finite_diff_check(m: &Model, y: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    let (_, g) = backward(m, y, gt)?;
    Ok(finite_diff_report(m, y, gt, &g, eps)?.max_rel_error)
}
