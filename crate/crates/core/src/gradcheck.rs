//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is ~0 are judged on absolute error instead of amplified rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar. It is called `2·len(x) + 1` times and must be deterministic.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(probe.clone());
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: x.len(),
        tol,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_err || i == 0 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
