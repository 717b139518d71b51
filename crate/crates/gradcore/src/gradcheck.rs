//! Central finite differences, used to validate reverse-mode gradients.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the backward implementation it is meant to verify.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a floor of `1e-6` on the denominator, so that
/// vanishing gradients are compared in absolute terms.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients(f: &dyn Fn(&[Tensor]) -> Result<f64>, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh tape with one parameter leaf per input and must
/// return a scalar output.
pub fn check_gradients(
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };
    let numeric = numeric_gradients(&eval, inputs, step)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = rel_error(av, nv);
            report.max_abs_error = report.max_abs_error.max((av - nv).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
