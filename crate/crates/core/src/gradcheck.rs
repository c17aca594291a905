//! Central finite-difference gradient oracle.

/// Denominator floor for the relative error. Central differences at ε = 1e-5
/// carry rounding noise near 1e-11·|f|, so entries smaller than this are
/// compared on an absolute scale instead.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation left the differentiable region.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_relative_error > self.max_relative_error || self.worst_index.is_none() {
            self.max_relative_error = other.max_relative_error;
            self.worst_index = other.worst_index;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare `analytic` against `(f(w+ε) − f(w−ε)) / 2ε` at every coordinate.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], epsilon: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    finite_diff_check_masked(|w| Some(loss(w)), params, analytic, epsilon, 0..params.len())
}

/// Like [`finite_diff_check`] over a chosen set of coordinates; `loss` may
/// return `None` to report that the perturbed point crossed a kink (ReLU sign
/// flip, pooling winner change), in which case that coordinate is skipped.
pub fn finite_diff_check_masked<F, I>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
    coords: I,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Option<f64>,
    I: IntoIterator<Item = usize>,
{
    assert_eq!(params.len(), analytic.len());
    let mut w = params.to_vec();
    let mut report = GradCheckReport::default();
    for i in coords {
        let orig = w[i];
        w[i] = orig + epsilon;
        let plus = loss(&w);
        w[i] = orig - epsilon;
        let minus = loss(&w);
        w[i] = orig;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.skipped += 1;
            continue;
        };
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst_index.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst_index = Some(i);
        }
    }
    report
}
