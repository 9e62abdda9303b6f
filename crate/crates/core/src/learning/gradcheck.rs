//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::learning::{Grads, Params};

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Compares the analytic gradients returned by `f` at `params` with central
/// differences `(f(p+h) − f(p−h)) / 2h`.
///
/// Per entry the error is `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`; the
/// maximum over all checked entries is reported. `max_per_param` bounds the
/// number of entries probed per tensor (evenly strided), `None` checks all.
pub fn gradcheck<F>(
    f: F,
    params: &Params,
    h: f64,
    max_per_param: Option<usize>,
) -> Result<GradcheckReport>
where
    F: Fn(&Params) -> Result<(f64, Grads)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck loss {loss}")));
    }
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let Some(a) = analytic.get(name) else {
            continue;
        };
        let n = value.numel();
        let stride = match max_per_param {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = value.data()[idx];
            probe.get_mut(name)?.data_mut()[idx] = orig + h;
            let plus = f(&probe)?.0;
            probe.get_mut(name)?.data_mut()[idx] = orig - h;
            let minus = f(&probe)?.0;
            probe.get_mut(name)?.data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck probe of `{name}`[{idx}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let ana = a.data()[idx];
            let denom = ana.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let err = (ana - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
