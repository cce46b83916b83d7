//! Central finite-difference gradient checking.
//!
//! The checker only ever reads forward values; it never looks at the
//! gradients the tape computes except to compare against them.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used by the central difference.
pub const STEP: f64 = 1e-5;
/// Allowed relative error between analytic and numeric gradients.
pub const REL_TOL: f64 = 1e-4;
/// Absolute error below which a component always passes.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
    }
}

/// Relative error with the absolute floor folded in: components whose
/// absolute disagreement is under [`ABS_FLOOR`] report zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    if abs <= ABS_FLOOR {
        return 0.0;
    }
    abs / analytic.abs().max(numeric.abs())
}

/// Compares the tape's gradients of the scalar produced by `build` against
/// central differences for every element of every input.
pub fn check<F>(inputs: &[Tensor], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad_data(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + STEP;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - STEP;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = rel_err(a, numeric);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > REL_TOL {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
