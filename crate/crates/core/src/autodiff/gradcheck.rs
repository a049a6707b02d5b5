//! Finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |numeric|)` seen.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare backprop gradients of `f(inputs)` against central differences.
///
/// Non-scalar outputs are reduced with fixed random weights. At most
/// `max_entries` coordinates per input are perturbed, by `±step`.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    step: f32,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let weights: Vec<f32> = (0..tape.value(out).numel())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let obj = tape.weighted_sum(out, &weights)?;
    let grads = tape.backward(obj)?;

    let eval = |xs: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, w)| *a as f64 * *w as f64)
            .sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic = grads.get_or_zeros(*v, n);
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            (0..max_entries).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let h = ((orig + step) as f64) - ((orig - step) as f64);
            let numeric = (plus - minus) / h;
            let err = (analytic[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    fn assert_ok(r: GradCheckReport) {
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-3, "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn conv3d_gradients() {
        let inputs = [
            rand_tensor(&[2, 4, 5, 5], 1, 1.0),
            rand_tensor(&[3, 2, 3, 3, 3], 2, 0.3),
            rand_tensor(&[3], 3, 0.3),
        ];
        let r = check_gradients(
            &inputs,
            |t, v| t.conv3d(v[0], v[1], v[2], [1, 2, 2], [1, 1, 1]),
            1e-3,
            24,
            7,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn linear_tanh_relu_gradients() {
        let inputs = [
            rand_tensor(&[3, 4], 4, 1.0),
            rand_tensor(&[5, 4], 5, 0.5),
            rand_tensor(&[5], 6, 0.5),
        ];
        let r = check_gradients(
            &inputs,
            |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                let a = t.tanh(h);
                let b = t.relu(h);
                let s = t.add(a, b)?;
                Ok(t.scale(s, 0.7))
            },
            1e-3,
            64,
            8,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn structural_op_gradients() {
        let inputs = [rand_tensor(&[2, 3], 9, 1.0), rand_tensor(&[2, 2], 10, 1.0)];
        let r = check_gradients(
            &inputs,
            |t, v| {
                let tr = t.transpose(v[0])?;
                let rs = t.reshape(tr, &[2, 3])?;
                let c = t.concat_cols(&[rs, v[1]])?;
                let r0 = t.select_row(c, 1)?;
                let r1 = t.select_row(c, 0)?;
                t.stack_time(&[r0, r1], [5, 1, 1])
            },
            1e-3,
            64,
            11,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn pool_and_losses_gradients() {
        let inputs = [rand_tensor(&[3, 2, 4, 4], 12, 1.0)];
        let target = rand_tensor(&[2, 3], 13, 1.0);
        let r = check_gradients(
            &inputs,
            |t, v| {
                let p = t.global_spatial_pool(v[0])?;
                let pt = t.transpose(p)?;
                let ce = t.softmax_cross_entropy(pt, &[2, 0])?;
                let m = t.mse(pt, &target)?;
                t.add(ce, m)
            },
            1e-3,
            96,
            14,
        )
        .unwrap();
        assert_ok(r);
    }
}
