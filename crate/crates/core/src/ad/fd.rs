/// Central finite differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor, as used by the gradient checks:
/// below `small` in magnitude the absolute error is reported instead.
pub fn grad_error(analytic: f64, numeric: f64, small: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < small {
        diff
    } else {
        diff / scale
    }
}
