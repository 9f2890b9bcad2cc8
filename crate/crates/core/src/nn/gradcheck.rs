use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative error used by the gradient checks:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares an analytic gradient of a scalar function against central
/// differences with step `h`, returning the largest relative error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, analytic: &Tensor, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    finite_diff_check_filtered(f, point, analytic, h, |_| true)
}

/// Like [`finite_diff_check`], but only coordinates for which `include`
/// returns true are compared (e.g. to skip points next to a kink).
pub fn finite_diff_check_filtered<F, P>(mut f: F, point: &Tensor, analytic: &Tensor, h: f64, include: P) -> f64
where
    F: FnMut(&Tensor) -> f64,
    P: Fn(usize) -> bool,
{
    assert_eq!(point.shape(), analytic.shape(), "gradient shape differs from point");
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        if !include(i) {
            continue;
        }
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}
