//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of the backward rules it is used to verify.

use super::{Result, Tape, Tensor, Var};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Input index and flat coordinate of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Magnitude below which gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Numeric gradient of a scalar function of several tensors.
pub fn numeric_gradient(
    inputs: &[Tensor],
    step: f64,
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = f(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = f(&work)?;
            work[k].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares tape gradients against central differences. `build` records a
/// scalar function of the given leaves on a fresh tape.
pub fn check(
    inputs: &[Tensor],
    step: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let numeric = numeric_gradient(inputs, step, &mut |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok(t.value(r).item())
    })?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (k, (v, num)) in vars.iter().zip(&numeric).enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let ana = grads.get(*v).unwrap_or(&zeros);
        for i in 0..num.len() {
            let e = rel_error(ana.data()[i], num.data()[i]);
            if e > report.max_rel_error || !e.is_finite() {
                report = GradCheckReport {
                    max_rel_error: if e.is_finite() { e } else { f64::INFINITY },
                    worst: (k, i),
                    analytic: ana.data()[i],
                    numeric: num.data()[i],
                };
            }
        }
    }
    Ok(report)
}
