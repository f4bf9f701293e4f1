/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central-difference gradient check of scalar `f` at `x`.
///
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`;
/// `floor` keeps coordinates whose true gradient is ~0 from dominating.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, floor: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match input length");
    let mut probe = x.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > out.max_rel_error || !rel.is_finite() {
            out = GradCheck { max_rel_error: rel, worst_index: i, analytic: a, numeric };
        }
    }
    out
}
