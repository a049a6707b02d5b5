//! Per-axis inertial binning, causal action alignment and range fitting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ActionSequence;
use crate::{AXIS_NAMES, NUM_AXES};

/// Default number of bins per axis.
pub const DEFAULT_BINS: usize = 7;
/// Default percentile used by [`fit_ranges`].
pub const DEFAULT_PERCENTILE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("sequence needs at least 2 rows for a causal shift, got {0}")]
    TooShort(usize),
    #[error("cannot fit ranges on an empty dataset")]
    EmptyDataset,
    #[error("percentile must lie in [0, 0.5), got {0}")]
    BadPercentile(f64),
    #[error("ranges file: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("label shape mismatch: {0}")]
    Shape(String),
}

/// Physical range `[min, max]` of one axis, split into `bins` equal bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    min: f64,
    max: f64,
    bins: usize,
}

impl AxisRange {
    pub fn new(min: f64, max: f64, bins: usize) -> Result<Self, QuantError> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(QuantError::InvalidRange(format!(
                "need finite min < max, got [{min}, {max}]"
            )));
        }
        if bins < 2 {
            return Err(QuantError::InvalidRange(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self { min, max, bins })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn bins(&self) -> usize {
        self.bins
    }
}

/// The six per-axis ranges, in `AXIS_NAMES` order.
pub type AxisRanges = [AxisRange; NUM_AXES];

/// `min(K-1, floor((clip(x, m, M) - m) / (M - m) * K))`
pub fn quantize(x: f64, range: &AxisRange) -> Result<usize, QuantError> {
    if !x.is_finite() {
        return Err(QuantError::NonFinite(x));
    }
    let clipped = x.clamp(range.min, range.max);
    let scaled = (clipped - range.min) / (range.max - range.min) * range.bins as f64;
    Ok((scaled.floor() as usize).min(range.bins - 1))
}

/// Integer bin labels, stored axis-major: `axes[j][t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinLabels {
    axes: [Vec<usize>; NUM_AXES],
}

impl BinLabels {
    /// Build from axis-major rows; every axis must have the same length.
    pub fn new(axes: [Vec<usize>; NUM_AXES]) -> Result<Self, QuantError> {
        let len = axes[0].len();
        if axes.iter().any(|a| a.len() != len) {
            return Err(QuantError::Shape("axes have different lengths".into()));
        }
        Ok(Self { axes })
    }

    pub fn len(&self) -> usize {
        self.axes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, j: usize) -> &[usize] {
        &self.axes[j]
    }

    pub fn get(&self, j: usize, t: usize) -> usize {
        self.axes[j][t]
    }
}

pub fn quantize_sequence(
    seq: &ActionSequence,
    ranges: &AxisRanges,
) -> Result<BinLabels, QuantError> {
    let mut axes: [Vec<usize>; NUM_AXES] = Default::default();
    for (j, axis) in axes.iter_mut().enumerate() {
        *axis = seq
            .axis(j)
            .map(|x| quantize(x, &ranges[j]))
            .collect::<Result<_, _>>()?;
    }
    BinLabels::new(axes)
}

/// Left-shift by one frame so that row `t` carries the command for the
/// transition `t -> t+1`. The last row is duplicated to keep the length.
pub fn causal_shift(seq: &ActionSequence) -> Result<ActionSequence, QuantError> {
    let rows = seq.rows();
    if rows.len() < 2 {
        return Err(QuantError::TooShort(rows.len()));
    }
    let mut out: Vec<_> = rows[1..].to_vec();
    out.push(rows[rows.len() - 1]);
    Ok(ActionSequence::new(out, seq.fps()).expect("shift of a valid sequence is valid"))
}

/// Fit per-axis ranges from the `q` and `1 - q` percentiles of the pooled values.
/// Degenerate axes (all values equal at those percentiles) are widened by ±1.
pub fn fit_ranges(
    dataset: &[ActionSequence],
    q: f64,
    bins: usize,
) -> Result<AxisRanges, QuantError> {
    if dataset.is_empty() || dataset.iter().all(|s| s.is_empty()) {
        return Err(QuantError::EmptyDataset);
    }
    if !(0.0..0.5).contains(&q) {
        return Err(QuantError::BadPercentile(q));
    }
    let mut out = Vec::with_capacity(NUM_AXES);
    for j in 0..NUM_AXES {
        let mut pooled: Vec<f64> = dataset.iter().flat_map(|s| s.axis(j)).collect();
        let lo = percentile_select(&mut pooled, q);
        let hi = percentile_select(&mut pooled, 1.0 - q);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        out.push(AxisRange::new(lo, hi, bins)?);
    }
    Ok(out.try_into().expect("six axes"))
}

/// Linear-interpolated percentile at rank `p * (n - 1)` via selection.
fn percentile_select(values: &mut [f64], p: f64) -> f64 {
    let n = values.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    let (_, &mut a, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let b = if hi == lo {
        a
    } else {
        // The (lo+1)-th order statistic is the minimum of the upper partition.
        rest.iter().copied().fold(f64::INFINITY, f64::min)
    };
    a + frac * (b - a)
}

/// Write ranges as six `axis=<name> m=<min> M=<max> K=<bins>` lines.
pub fn render_ranges(ranges: &AxisRanges) -> String {
    let mut s = String::new();
    for (name, r) in AXIS_NAMES.iter().zip(ranges) {
        let _ = writeln!(s, "axis={name} m={} M={} K={}", r.min, r.max, r.bins);
    }
    s
}

pub fn parse_ranges(text: &str) -> Result<AxisRanges, QuantError> {
    let mut found: [Option<AxisRange>; NUM_AXES] = [None; NUM_AXES];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (mut axis, mut m, mut big_m, mut k) = (None, None, None, None);
        for field in line.split_whitespace() {
            let (key, val) = field
                .split_once('=')
                .ok_or_else(|| QuantError::Parse(format!("line {}: bad field `{field}`", n + 1)))?;
            let bad = || QuantError::Parse(format!("line {}: bad value for `{key}`", n + 1));
            match key {
                "axis" => axis = Some(val.to_string()),
                "m" => m = Some(val.parse::<f64>().map_err(|_| bad())?),
                "M" => big_m = Some(val.parse::<f64>().map_err(|_| bad())?),
                "K" => k = Some(val.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(QuantError::Parse(format!("line {}: unknown key `{key}`", n + 1))),
            }
        }
        let missing = || QuantError::Parse(format!("line {}: missing field", n + 1));
        let axis = axis.ok_or_else(missing)?;
        let j = AXIS_NAMES
            .iter()
            .position(|a| *a == axis)
            .ok_or_else(|| QuantError::Parse(format!("unknown axis `{axis}`")))?;
        let range = AxisRange::new(m.ok_or_else(missing)?, big_m.ok_or_else(missing)?, k.ok_or_else(missing)?)?;
        if found[j].replace(range).is_some() {
            return Err(QuantError::Parse(format!("axis `{axis}` given twice")));
        }
    }
    let mut out = Vec::with_capacity(NUM_AXES);
    for (j, r) in found.into_iter().enumerate() {
        out.push(r.ok_or_else(|| QuantError::Parse(format!("axis `{}` missing", AXIS_NAMES[j])))?);
    }
    Ok(out.try_into().expect("six axes"))
}

pub fn write_ranges(path: &Path, ranges: &AxisRanges) -> Result<(), QuantError> {
    fs::write(path, render_ranges(ranges))?;
    Ok(())
}

pub fn read_ranges(path: &Path) -> Result<AxisRanges, QuantError> {
    parse_ranges(&fs::read_to_string(path)?)
}
