//! Central finite-difference verification of tape gradients.
//!
//! The checker only uses `replay` (forward evaluation), so it is independent
//! of the backward implementation it validates.

use super::tape::Tape;
use super::NumericsError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub h: f64,
    pub rel_tol: f64,
    /// Absolute floor below which the relative test is waived.
    pub abs_floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { h: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7 }
    }
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checks: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks += other.checks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// Compare analytic gradients of the scalar terminal against central finite
/// differences, for every named parameter on the tape. Leaves are restored
/// after each perturbation.
pub fn check(tape: &mut Tape, settings: GradCheckSettings) -> Result<GradCheckReport, NumericsError> {
    tape.replay()?;
    let analytic = tape.backward(None)?;
    let params = tape.params();
    let mut report = GradCheckReport::default();

    for (name, id) in params {
        let base = tape.value(id).clone();
        let grad = analytic.get(&name).expect("backward covers all params").clone();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += settings.h;
            tape.set_leaf(id, plus)?;
            let f_plus = tape.replay()?.data()[0];

            let mut minus = base.clone();
            minus.data_mut()[k] -= settings.h;
            tape.set_leaf(id, minus)?;
            let f_minus = tape.replay()?.data()[0];

            let fd = (f_plus - f_minus) / (2.0 * settings.h);
            let an = grad.data()[k];
            let err = (fd - an).abs();
            let scale = fd.abs().max(an.abs());
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            report.checks += 1;
            if err > settings.abs_floor && rel > settings.rel_tol {
                report.failures.push(format!(
                    "{name}[{k}]: analytic {an:.9e} vs finite-difference {fd:.9e} (rel {rel:.3e})"
                ));
            }
            if err > settings.abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
            }
        }
        tape.set_leaf(id, base)?;
    }
    tape.replay()?;
    Ok(report)
}
