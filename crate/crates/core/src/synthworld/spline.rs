//! Uniform cubic B-splines with analytic first and second derivatives.

/// Uniform cubic B-spline over `N`-dimensional control points.
///
/// With `n + 3` control points and knot spacing `h` the curve is defined on
/// `[0, n h]` and is twice continuously differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicBSpline<const N: usize> {
    spacing: f64,
    control: Vec<[f64; N]>,
}

/// Value and first two time derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSample<const N: usize> {
    pub value: [f64; N],
    pub d1: [f64; N],
    pub d2: [f64; N],
}

impl<const N: usize> CubicBSpline<N> {
    pub fn new(spacing: f64, control: Vec<[f64; N]>) -> Self {
        assert!(spacing > 0.0, "knot spacing must be positive");
        assert!(control.len() >= 4, "a cubic B-spline needs 4 control points");
        Self { spacing, control }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn control(&self) -> &[[f64; N]] {
        &self.control
    }

    /// Length of the parameter domain.
    pub fn span(&self) -> f64 {
        (self.control.len() - 3) as f64 * self.spacing
    }

    /// Evaluate at `t`, clamped to the domain.
    pub fn eval(&self, t: f64) -> SplineSample<N> {
        let segments = self.control.len() - 3;
        let x = (t / self.spacing).clamp(0.0, segments as f64);
        let i = (x.floor() as usize).min(segments - 1);
        let u = x - i as f64;
        let (u2, u3) = (u * u, u * u * u);
        let om = 1.0 - u;

        // Difference form: constant control points give exactly constant
        // values and exactly zero derivatives.
        let p = &self.control[i..i + 4];
        let inv_h = 1.0 / self.spacing;
        let inv_h2 = inv_h * inv_h;
        // cumulative basis weights: sum_{k>=1} b_k, sum_{k>=2} b_k, b_3
        let w1 = 1.0 - om * om * om / 6.0;
        let w2 = (-2.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
        let w3 = u3 / 6.0;
        let q = [0.5 * om * om, -u2 + u + 0.5, 0.5 * u2];

        let mut out = SplineSample {
            value: [0.0; N],
            d1: [0.0; N],
            d2: [0.0; N],
        };
        for d in 0..N {
            let d0 = p[1][d] - p[0][d];
            let d1 = p[2][d] - p[1][d];
            let d2 = p[3][d] - p[2][d];
            out.value[d] = p[0][d] + w1 * d0 + w2 * d1 + w3 * d2;
            out.d1[d] = (q[0] * d0 + q[1] * d1 + q[2] * d2) * inv_h;
            out.d2[d] = (om * (d1 - d0) + u * (d2 - d1)) * inv_h2;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let s = CubicBSpline::new(
            0.3,
            vec![[0.0, 1.0], [0.5, -1.0], [2.0, 0.0], [1.0, 3.0], [-1.0, 2.0], [0.0, 0.0]],
        );
        let h = 1e-5;
        for k in 1..80 {
            let t = k as f64 * s.span() / 80.0;
            if t + h > s.span() {
                continue;
            }
            let (a, m, b) = (s.eval(t - h), s.eval(t), s.eval(t + h));
            for d in 0..2 {
                let d1 = (b.value[d] - a.value[d]) / (2.0 * h);
                let d2 = (b.value[d] - 2.0 * m.value[d] + a.value[d]) / (h * h);
                assert!((d1 - m.d1[d]).abs() < 1e-6, "d1 at {t}");
                assert!((d2 - m.d2[d]).abs() < 1e-3 * m.d2[d].abs().max(1.0), "d2 at {t}");
            }
        }
    }

    #[test]
    fn continuity_at_knots() {
        let s = CubicBSpline::new(0.5, vec![[1.0], [4.0], [-2.0], [0.0], [5.0]]);
        let eps = 1e-9;
        let (l, r) = (s.eval(0.5 - eps), s.eval(0.5 + eps));
        assert!((l.value[0] - r.value[0]).abs() < 1e-7);
        assert!((l.d1[0] - r.d1[0]).abs() < 1e-6);
        assert!((l.d2[0] - r.d2[0]).abs() < 1e-5);
    }

    #[test]
    fn constant_control_is_constant() {
        let s = CubicBSpline::new(0.2, vec![[3.0, -1.0, 2.0]; 6]);
        let v = s.eval(0.37);
        assert_eq!(v.d1, [0.0; 3]);
        assert_eq!(v.d2, [0.0; 3]);
        for (a, b) in v.value.iter().zip([3.0, -1.0, 2.0]) {
            assert_eq!(*a, b);
        }
    }
}
