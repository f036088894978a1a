//! Central finite differences for checking analytic gradients.

/// Relative error used by every gradient check in this crate. The `floor`
/// keeps entries whose true gradient is essentially zero from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function of
/// one coordinate.
pub fn central_difference<F>(x0: f64, h: f64, mut eval: F) -> f64
where
    F: FnMut(f64) -> f64,
{
    let plus = eval(x0 + h);
    let minus = eval(x0 - h);
    (plus - minus) / (2.0 * h)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over the chosen coordinates of `values`.
pub fn max_error_over<F>(
    values: &mut [f64],
    coords: &[usize],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut loss: F,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    for &i in coords {
        let x0 = values[i];
        let numeric = central_difference(x0, h, |v| {
            values[i] = v;
            loss(values)
        });
        values[i] = x0;
        worst = worst.max(relative_error(analytic[i], numeric, floor));
    }
    worst
}
