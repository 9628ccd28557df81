//! Central finite-difference verification of analytic gradients.
//!
//! The loss builders in `align`, `router`, and `generator` are all checked
//! against this utility; it is the one oracle every differentiable path in
//! the crate must satisfy.

use crate::diffcore::param::ParameterBlock;
use crate::error::{Error, Result};

/// Compare `analytic` against central differences of `f` at `params`.
///
/// Returns `max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)` where
/// `fd_i = (f(p + h e_i) - f(p - h e_i)) / (2h)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParameterBlock,
    analytic: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&ParameterBlock) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite_diff_check: h must be > 0"));
    }
    if analytic.len() != params.values.len() {
        return Err(Error::dim("analytic gradient", params.values.len(), analytic.len()));
    }

    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    for i in 0..probe.values.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let fp = f(&probe)?;
        probe.values[i] = orig - h;
        let fm = f(&probe)?;
        probe.values[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_check: objective at coordinate {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
