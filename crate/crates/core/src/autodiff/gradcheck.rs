//! Central finite-difference gradient checking.

/// Coordinates whose analytic and numeric gradients are both below this are
/// compared on an absolute scale (`|a - n| / FLOOR`).
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// One evaluation of the function under test: its value and a fingerprint of
/// the active branch of every piecewise-linear unit (see
/// [`crate::autodiff::Graph::kink_signature`]).
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because `x +/- step` falls on different sides of a kink.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_index = other.worst_index;
        }
    }
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn check_gradient<F>(point: &[f64], analytic: &[f64], step: f64, mut f: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Probe,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let base = f(point).signature;
    let mut x = point.to_vec();
    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if plus.signature != base || minus.signature != base {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
    }
    report
}
