use super::flow::FlowField;

/// Length of [`flow_features`] for a `grid × grid` field.
pub fn feature_len(grid: usize) -> usize {
    4 * grid * grid + 4
}

/// Per cell `(u, v, sin θ, cos θ)` with θ the flow direction (both 0 for
/// zero flow), then mean divergence, mean curl, mean magnitude and total
/// variance of the field.
pub fn flow_features(field: &FlowField) -> Vec<f64> {
    let g = field.grid;
    let n = g * g;
    let mut out = Vec::with_capacity(feature_len(g));
    for i in 0..n {
        let (u, v) = (field.u[i], field.v[i]);
        let m = u.hypot(v);
        let (s, c) = if m > 0.0 { (v / m, u / m) } else { (0.0, 0.0) };
        out.extend([u, v, s, c]);
    }
    let dx = field.width as f64 / g as f64;
    let dy = field.height as f64 / g as f64;
    let at = |a: &[f64], x: usize, y: usize| a[y * g + x];
    let deriv = |a: &[f64], x: usize, y: usize, along_x: bool| -> f64 {
        if g < 2 {
            return 0.0;
        }
        let (i, step) = if along_x { (x, dx) } else { (y, dy) };
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(g - 1));
        let (a0, a1) = if along_x {
            (at(a, lo, y), at(a, hi, y))
        } else {
            (at(a, x, lo), at(a, x, hi))
        };
        (a1 - a0) / ((hi - lo) as f64 * step)
    };
    let (mut div, mut curl) = (0.0, 0.0);
    for y in 0..g {
        for x in 0..g {
            div += deriv(&field.u, x, y, true) + deriv(&field.v, x, y, false);
            curl += deriv(&field.v, x, y, true) - deriv(&field.u, x, y, false);
        }
    }
    let nf = n as f64;
    let mag = field.u.iter().zip(&field.v).map(|(u, v)| u.hypot(*v)).sum::<f64>() / nf;
    let mu = field.u.iter().sum::<f64>() / nf;
    let mv = field.v.iter().sum::<f64>() / nf;
    let var = field
        .u
        .iter()
        .zip(&field.v)
        .map(|(u, v)| (u - mu).powi(2) + (v - mv).powi(2))
        .sum::<f64>()
        / nf;
    out.extend([div / nf, curl / nf, mag, var]);
    out
}
