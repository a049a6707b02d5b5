use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::NUM_AXES;

use super::MetricsError;

/// Per-axis ridge regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `NUM_AXES` rows of `D` feature weights followed by the bias.
    pub weights: Vec<Vec<f64>>,
    pub lambda: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl RidgeModel {
    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    fn standardize<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((v, m), s)| (v - m) / s)
    }

    pub fn predict(&self, x: &[f64]) -> Result<[f64; NUM_AXES], MetricsError> {
        if x.len() != self.dim() {
            return Err(MetricsError::Shape(format!(
                "{} features, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        let z: Vec<f64> = self.standardize(x).collect();
        Ok(std::array::from_fn(|j| {
            let w = &self.weights[j];
            z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[self.dim()]
        }))
    }

    /// Penalized least-squares objective of axis `j` in standardized units.
    pub fn objective(&self, x: &[Vec<f64>], y: &[[f64; NUM_AXES]], j: usize, weights: &[f64]) -> f64 {
        let d = self.dim();
        let mut loss = 0.0;
        for (row, target) in x.iter().zip(y) {
            let pred: f64 = self.standardize(row).zip(weights).map(|(a, b)| a * b).sum::<f64>() + weights[d];
            loss += (pred - target[j]).powi(2);
        }
        loss + self.lambda * weights[..d].iter().map(|w| w * w).sum::<f64>()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let d = self.dim();
        let ok = self.lambda >= 0.0
            && self.feature_std.len() == d
            && self.weights.len() == NUM_AXES
            && self.weights.iter().all(|w| w.len() == d + 1 && w.iter().all(|v| v.is_finite()))
            && self.feature_std.iter().all(|s| *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(MetricsError::Shape("malformed ridge model".into()))
        }
    }
}

/// Closed-form ridge fit. Features are standardized; the bias is not
/// penalized. Solved by Cholesky factorization of `XᵀX + λI`.
pub fn fit_ridge(x: &[Vec<f64>], y: &[[f64; NUM_AXES]], lambda: f64) -> Result<RidgeModel, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::Shape(format!("{} feature rows vs {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(MetricsError::Shape("ridge needs at least 2 samples".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(MetricsError::Ridge(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(MetricsError::Shape("feature rows differ in length".into()));
    }
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let s = (x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let xs = DMatrix::from_fn(x.len(), d, |i, k| (x[i][k] - mean[k]) / std[k]);
    let mut gram = xs.transpose() * &xs;
    for k in 0..d {
        gram[(k, k)] += lambda;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        MetricsError::Ridge(format!(
            "normal equations are singular at lambda = {lambda}; use lambda > 0"
        ))
    })?;
    let mut weights = Vec::with_capacity(NUM_AXES);
    for j in 0..NUM_AXES {
        let ym = y.iter().map(|r| r[j]).sum::<f64>() / n;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|r| r[j] - ym));
        let w = chol.solve(&(xs.transpose() * yc));
        let mut row: Vec<f64> = w.iter().copied().collect();
        // Standardized columns have zero mean, so the bias is the target mean.
        row.push(ym);
        weights.push(row);
    }
    let model = RidgeModel {
        weights,
        lambda,
        feature_mean: mean,
        feature_std: std,
    };
    if model.weights.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::Ridge("solution is not finite".into()));
    }
    Ok(model)
}

/// Candidate λ values for cross-validation.
pub const LAMBDA_GRID: [f64; 9] = [1e-3, 1e-2, 1e-1, 1.0, 3.0, 10.0, 30.0, 100.0, 1000.0];

/// Pick λ from `grid` by k-fold validation. Rows sharing a `group` value
/// (a clip) always fall in the same fold. Ties resolve to the smaller λ.
pub fn select_lambda(
    x: &[Vec<f64>],
    y: &[[f64; NUM_AXES]],
    groups: &[usize],
    folds: usize,
    grid: &[f64],
) -> Result<f64, MetricsError> {
    if groups.len() != x.len() || folds < 2 || grid.is_empty() {
        return Err(MetricsError::Shape("invalid cross-validation setup".into()));
    }
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let mut sse = 0.0;
        for f in 0..folds {
            let (mut xt, mut yt, mut xv, mut yv) = (vec![], vec![], vec![], vec![]);
            for i in 0..x.len() {
                if groups[i] % folds == f {
                    xv.push(x[i].clone());
                    yv.push(y[i]);
                } else {
                    xt.push(x[i].clone());
                    yt.push(y[i]);
                }
            }
            if xv.is_empty() || xt.len() < 2 {
                continue;
            }
            let m = match fit_ridge(&xt, &yt, lambda) {
                Ok(m) => m,
                Err(_) => {
                    sse = f64::INFINITY;
                    break;
                }
            };
            for (row, target) in xv.iter().zip(&yv) {
                let p = m.predict(row)?;
                sse += p.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        if sse < best.0 {
            best = (sse, lambda);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<[f64; NUM_AXES]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y = x
            .iter()
            .map(|r| std::array::from_fn(|j| r.iter().enumerate().map(|(k, v)| v * ((j + k) as f64 * 0.3).sin()).sum::<f64>() + j as f64 + rng.gen_range(-0.1..0.1)))
            .collect();
        (x, y)
    }

    #[test]
    fn exactly_determined_system_interpolates() {
        let (x, y) = data(5, 4, 1);
        let m = fit_ridge(&x, &y, 0.0).unwrap();
        for (r, t) in x.iter().zip(&y) {
            let p = m.predict(r).unwrap();
            for j in 0..NUM_AXES {
                assert!((p[j] - t[j]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let (x, y) = data(40, 6, 2);
        let m = fit_ridge(&x, &y, 1e9).unwrap();
        for w in &m.weights {
            let norm = w[..6].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-3);
        }
    }

    #[test]
    fn matches_dense_normal_equation_inverse() {
        let (x, y) = data(30, 5, 3);
        let lambda = 0.7;
        let m = fit_ridge(&x, &y, lambda).unwrap();
        // Oracle: augmented design [z, 1], penalty on z only, explicit inverse.
        let n = x.len();
        let a = DMatrix::from_fn(n, 6, |i, k| {
            if k == 5 {
                1.0
            } else {
                (x[i][k] - m.feature_mean[k]) / m.feature_std[k]
            }
        });
        let mut lhs = a.transpose() * &a;
        for k in 0..5 {
            lhs[(k, k)] += lambda;
        }
        let inv = lhs.try_inverse().unwrap();
        for j in 0..NUM_AXES {
            let b = DVector::from_iterator(n, y.iter().map(|r| r[j]));
            let w = &inv * (a.transpose() * b);
            for k in 0..6 {
                assert!((w[k] - m.weights[j][k]).abs() < 1e-8, "axis {j} coef {k}");
            }
        }
    }

    #[test]
    fn rank_deficient_without_penalty_fails() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y = vec![[1.0; NUM_AXES]; 6];
        assert!(matches!(fit_ridge(&x, &y, 0.0), Err(MetricsError::Ridge(_))));
        assert!(fit_ridge(&x, &y, 0.1).is_ok());
    }

    #[test]
    fn solution_minimizes_objective() {
        let (x, y) = data(25, 4, 4);
        let m = fit_ridge(&x, &y, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for j in 0..NUM_AXES {
            let best = m.objective(&x, &y, j, &m.weights[j]);
            for _ in 0..100 {
                let mut delta: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                delta.iter_mut().for_each(|v| *v *= 1e-2 / norm);
                let moved: Vec<f64> = m.weights[j].iter().zip(&delta).map(|(a, b)| a + b).collect();
                assert!(best <= m.objective(&x, &y, j, &moved));
            }
        }
    }

    #[test]
    fn cross_validation_prefers_small_lambda_on_clean_data() {
        let (x, y) = data(60, 3, 6);
        let groups: Vec<usize> = (0..60).map(|i| i / 4).collect();
        let l = select_lambda(&x, &y, &groups, 5, &LAMBDA_GRID).unwrap();
        assert!(l <= 1.0, "{l}");
    }
}
