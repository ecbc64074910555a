//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose gradient
/// is numerically zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative deviation over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate achieving `max_rel_error`.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates where the function is not differentiable at the probe
    /// scale (ties in max-type operations, ReLU kinks).
    pub skipped: Vec<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the scalar `f` at `x` with central
/// differences `(f(x + h e) - f(x - h e)) / 2h`.
///
/// A coordinate whose error exceeds `flag_tol` is flagged as a kink, and
/// excluded from the maximum, when the one-sided differences or the
/// half-step central difference disagree with the full-step one by at
/// least half the observed error: the finite difference itself has not
/// converged there, which only happens at non-differentiable points.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_flagging(f, x, h, 1e-4)
}

pub fn finite_diff_check_flagging<F>(
    f: F,
    x: &Tensor<f64>,
    h: f64,
    flag_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out)[0])
    };
    let analytic = {
        let mut g = Graph::new();
        let v = g.param(x);
        let out = f(&mut g, v)?;
        let grads = g.backward(out)?;
        grads
            .get(v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; x.len()])
    };
    let mut probe = x.clone();
    let mut at = |i: usize, d: f64| -> Result<f64> {
        let orig = x.values()[i];
        probe.values_mut()[i] = orig + d;
        let v = eval(&probe);
        probe.values_mut()[i] = orig;
        v
    };
    let mut f0 = None;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
    };
    for (i, &a) in analytic.iter().enumerate() {
        let (fp, fm) = (at(i, h)?, at(i, -h)?);
        let n = (fp - fm) / (2.0 * h);
        let err = relative_error(a, n);
        if err >= flag_tol {
            let base = match f0 {
                Some(v) => v,
                None => {
                    let v = eval(x)?;
                    f0 = Some(v);
                    v
                }
            };
            let one_sided_gap = ((fp - base) / h - (base - fm) / h).abs();
            let n_half = (at(i, h / 2.0)? - at(i, -h / 2.0)?) / h;
            let gap = (a - n).abs();
            if one_sided_gap >= 0.5 * gap || (n - n_half).abs() >= 0.5 * gap {
                report.skipped.push(i);
                continue;
            }
        }
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    Ok(report)
}
