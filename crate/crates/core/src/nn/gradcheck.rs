//! Central finite-difference checks of analytic gradients.

use super::param::{ParamId, ParamStore};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` gradients at `coords` with `(f(w+h) - f(w-h)) / 2h`.
/// `params` is restored before returning.
pub fn check<F>(
    params: &mut ParamStore,
    analytic: &ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &(id, idx) in coords {
        let orig = params.value(id).data()[idx];
        params.value_mut(id).data_mut()[idx] = orig + h;
        let plus = loss(params)?;
        params.value_mut(id).data_mut()[idx] = orig - h;
        let minus = loss(params)?;
        params.value_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic.grad(id).data()[idx], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((params.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}
