//! Central finite-difference gradient checks in `f64`.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Absolute error accepted regardless of magnitude.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
    /// Elements whose perturbed evaluations switched some ReLU on or off,
    /// where a finite difference does not estimate the derivative.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn element_ok(analytic: f64, numeric: f64, tol: f64) -> (bool, f64, f64) {
    let abs = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { abs / scale } else { 0.0 };
    (abs <= ABS_FLOOR || rel < tol, rel, abs)
}

/// Compares reverse-mode gradients of a scalar function of several tensor
/// inputs against the fourth-order central difference with step [`FD_STEP`].
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.scalar_value(out), tape.relu_pattern()))
    };
    let (_, pattern) = eval(inputs)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, failures: 0, skipped: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            let mut smooth = true;
            let mut at = |offset: f64| -> Result<f64> {
                work[k].data_mut()[e] = orig + offset;
                let (v, p) = eval(&work)?;
                smooth &= p == pattern;
                Ok(v)
            };
            let (p1, m1) = (at(FD_STEP)?, at(-FD_STEP)?);
            let (p2, m2) = (at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
            work[k].data_mut()[e] = orig;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let (ok, rel, abs) = element_ok(analytic.data()[e], numeric, tol);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.max_abs_err = report.max_abs_err.max(abs);
            if !ok {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Single-input form: `true` when every element passes.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<bool>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let r = grad_check_many(|tape, vs| f(tape, vs[0]), core::slice::from_ref(x), tol)?;
    Ok(r.passed())
}
