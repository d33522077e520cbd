//! Reverse-mode gradients against central finite differences.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare the reverse-mode gradient of a scalar function with central
/// differences of step `step` at `point`.
///
/// `f` receives one gradient-tracked leaf per entry of `point` and must
/// return a single-element value.
pub fn grad_check<F>(f: F, point: &[Array], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Array]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Invalid(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&tape, &vars)?;
    let f0 = tape.item(out);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("function value {f0} at the check point")));
    }
    let grads = tape.backward(out);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Array> = point.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, point[i].len());
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = point[i].data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "input {i} element {j}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
