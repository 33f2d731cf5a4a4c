use super::{Tensor, TensorError};

/// One evaluation of the checked function.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    /// Branch signature of the evaluation (see [`Graph::branch_signature`](super::Graph::branch_signature)).
    /// A probe whose signature differs from the base point straddles a kink.
    pub signature: Option<u64>,
}

impl From<f64> for Probe {
    fn from(value: f64) -> Self {
        Self {
            value,
            signature: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    /// Worst `|g_analytic - g_fd| / max(1, |g_fd|)` over all probed coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub probed: usize,
    /// Coordinates skipped because `x ± h` crossed a piecewise boundary.
    pub kinked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Central-difference gradient check in 64-bit.
///
/// `f` evaluates the scalar function at the supplied parameter values;
/// `analytic` holds the gradients under test, shaped like `params`.
/// A check with `tol <= 0` never passes.
pub fn finite_diff_check<F, P>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<FdReport, TensorError>
where
    F: FnMut(&[Tensor<f64>]) -> Result<P, TensorError>,
    P: Into<Probe>,
{
    if !(1e-6..=1e-2).contains(&h) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step {h} outside [1e-6, 1e-2]"
        )));
    }
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(TensorError::Invalid(
            "analytic gradients must match parameter shapes".into(),
        ));
    }
    let base: Probe = f(params)?.into();
    if !base.value.is_finite() {
        return Err(TensorError::NonFinite { op: "fd probe" });
    }
    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        probed: 0,
        kinked: 0,
        tol,
        passed: false,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus: Probe = f(&work)?.into();
            work[pi].data_mut()[ei] = orig - h;
            let minus: Probe = f(&work)?.into();
            work[pi].data_mut()[ei] = orig;
            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(TensorError::NonFinite { op: "fd probe" });
            }
            if base.signature.is_some()
                && (plus.signature != base.signature || minus.signature != base.signature)
            {
                report.kinked += 1;
                continue;
            }
            let fd = (plus.value - minus.value) / (2.0 * h);
            let err = (analytic[pi].data()[ei] - fd).abs() / fd.abs().max(1.0);
            report.probed += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((pi, ei));
            }
        }
    }
    report.passed = tol > 0.0 && report.max_rel_error <= tol;
    Ok(report)
}
