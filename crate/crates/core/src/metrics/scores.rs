use crate::dataio::ActionSequence;
use crate::probe::ProbeModel;
use crate::pseudovae::{label_pool, LatentTensor};
use crate::quantizer::{causal_shift, AxisRanges, BinLabels};
use crate::NUM_AXES;

use super::{AxisScores, MetricsError};

/// Commanded bins at latent resolution: causal shift, pool, quantize.
pub fn command_bins(commanded: &ActionSequence, ranges: &AxisRanges, s_t: usize) -> Result<BinLabels, MetricsError> {
    let shifted = causal_shift(commanded).map_err(|e| MetricsError::Shape(e.to_string()))?;
    label_pool(&shifted, ranges, s_t).map_err(|e| MetricsError::Shape(e.to_string()))
}

/// Per-axis agreement counts between predicted and target bins.
pub fn agreement(pred: &BinLabels, target: &BinLabels) -> Result<[usize; NUM_AXES], MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::Shape(format!(
            "{} predicted timesteps vs {} commanded",
            pred.len(),
            target.len()
        )));
    }
    Ok(std::array::from_fn(|j| {
        pred.axis(j).iter().zip(target.axis(j)).filter(|(a, b)| a == b).count()
    }))
}

/// AAS pooled as a flat mean over every (clip, timestep).
pub fn aas_from_bins(pairs: &[(BinLabels, BinLabels)]) -> Result<AxisScores, MetricsError> {
    let mut hits = [0usize; NUM_AXES];
    let mut total = 0usize;
    for (p, t) in pairs {
        let h = agreement(p, t)?;
        hits.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        total += t.len();
    }
    if total == 0 {
        return Err(MetricsError::Empty("aas"));
    }
    Ok(AxisScores::from_axes(hits.map(|h| h as f64 / total as f64)))
}

/// Action Alignment Score of one clip.
pub fn aas(
    probe: &ProbeModel,
    z: &LatentTensor,
    commanded: &ActionSequence,
    ranges: &AxisRanges,
) -> Result<AxisScores, MetricsError> {
    if commanded.len() != z.source_dims()[0] {
        return Err(MetricsError::Shape(format!(
            "{} commanded rows for a {}-frame clip",
            commanded.len(),
            z.source_dims()[0]
        )));
    }
    let target = command_bins(commanded, ranges, z.strides()[0])?;
    let pred = probe.predict(z).map_err(|e| MetricsError::Shape(e.to_string()))?;
    aas_from_bins(&[(pred, target)])
}

/// Sum of absolute consecutive jumps and the number of pairs, per axis.
pub fn jump_sums(pred: &BinLabels) -> ([usize; NUM_AXES], usize) {
    let sums = std::array::from_fn(|j| {
        pred.axis(j).windows(2).map(|w| w[0].abs_diff(w[1])).sum()
    });
    (sums, pred.len().saturating_sub(1))
}

/// PCR pooled as a flat mean over every consecutive pair of every clip.
pub fn pcr_from_bins(preds: &[BinLabels]) -> Result<AxisScores, MetricsError> {
    let mut sums = [0usize; NUM_AXES];
    let mut pairs = 0usize;
    for p in preds {
        if p.len() < 2 {
            return Err(MetricsError::Shape(format!("PCR needs at least 2 timesteps, got {}", p.len())));
        }
        let (s, n) = jump_sums(p);
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        pairs += n;
    }
    if pairs == 0 {
        return Err(MetricsError::Empty("pcr"));
    }
    Ok(AxisScores::from_axes(sums.map(|s| s as f64 / pairs as f64)))
}

/// Physical Consistency Rate of one clip's predictions.
pub fn pcr(probe: &ProbeModel, z: &LatentTensor) -> Result<AxisScores, MetricsError> {
    let pred = probe.predict(z).map_err(|e| MetricsError::Shape(e.to_string()))?;
    pcr_from_bins(&[pred])
}

/// Sample Pearson correlation; `degenerate` marks a zero-variance input,
/// for which `r` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pearson {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Pearson, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::Shape(format!("pearson: lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(MetricsError::Shape("pearson needs at least 2 samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Pearson {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Pearson {
        r: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bins(seq: &[usize]) -> BinLabels {
        BinLabels::new(std::array::from_fn(|_| seq.to_vec())).unwrap()
    }

    #[test]
    fn aas_cases() {
        let a = bins(&[1, 2, 3, 4]);
        assert_eq!(aas_from_bins(&[(a.clone(), a.clone())]).unwrap().mean, 1.0);
        let zeros = bins(&[0; 5]);
        let sixes = bins(&[6; 5]);
        assert_eq!(aas_from_bins(&[(zeros, sixes)]).unwrap().mean, 0.0);
        // Hand count: positions 0 and 3 agree.
        let p = bins(&[2, 5, 1, 0]);
        let t = bins(&[2, 4, 3, 0]);
        let s = aas_from_bins(&[(p, t)]).unwrap();
        assert!(s.per_axis.iter().all(|v| *v == 0.5));
        assert!(aas_from_bins(&[(bins(&[1, 2]), bins(&[1]))]).is_err());
    }

    #[test]
    fn pcr_cases() {
        assert_eq!(pcr_from_bins(&[bins(&[4; 6])]).unwrap().mean, 0.0);
        let alt: Vec<usize> = (0..9).map(|i| i % 2).collect();
        assert_eq!(pcr_from_bins(&[bins(&alt)]).unwrap().mean, 1.0);
        assert_eq!(pcr_from_bins(&[bins(&[0, 3, 3, 6])]).unwrap().mean, 2.0);
        assert!(pcr_from_bins(&[bins(&[1])]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap().r - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap().r + 1.0).abs() < 1e-12);
        // cov = 4, var_x = var_y = 5 (sums of squares) → 0.6
        assert!((pearson(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap().r - 0.6).abs() < 1e-12);
        let d = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(d.degenerate && d.r == 0.0);
        assert!(pearson(&x, &[1.0]).is_err());
    }

    fn seqs() -> impl Strategy<Value = Vec<Vec<usize>>> {
        prop::collection::vec(prop::collection::vec(0usize..7, 2..12), 1..6)
    }

    proptest! {
        #[test]
        fn pcr_matches_brute_force(seq in prop::collection::vec(0usize..7, 2..40)) {
            let got = pcr_from_bins(&[bins(&seq)]).unwrap().mean;
            let mut s = 0.0;
            for i in 1..seq.len() {
                s += (seq[i] as f64 - seq[i - 1] as f64).abs();
            }
            prop_assert!((got - s / (seq.len() - 1) as f64).abs() < 1e-12);
        }

        #[test]
        fn scores_ignore_clip_order(clips in seqs(), rot in 0usize..6) {
            let preds: Vec<BinLabels> = clips.iter().map(|c| bins(c)).collect();
            let mut rotated = preds.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            prop_assert_eq!(pcr_from_bins(&preds).unwrap(), pcr_from_bins(&rotated).unwrap());
            let pairs: Vec<_> = preds.iter().map(|p| (p.clone(), bins(&vec![3; p.len()]))).collect();
            let mut rp = pairs.clone();
            rp.rotate_left(k);
            prop_assert_eq!(aas_from_bins(&pairs).unwrap(), aas_from_bins(&rp).unwrap());
        }

        #[test]
        fn pearson_affine_sign(
            xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -3.0f64..3.0,
        ) {
            let x: Vec<f64> = xy.iter().map(|p| p.0).collect();
            let y: Vec<f64> = xy.iter().map(|p| p.1).collect();
            let base = pearson(&x, &y).unwrap();
            prop_assume!(!base.degenerate);
            let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let moved = pearson(&ax, &y).unwrap();
            prop_assert!((moved.r - a.signum() * base.r).abs() < 1e-9);
        }
    }
}
