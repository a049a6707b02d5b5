//! Latent-space probe: a 3-D conv trunk, global spatial pooling and one MLP
//! head per inertial axis, emitting K-way logits per latent timestep.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AdamW, AdamWConfig, AutodiffError, ParamSet, Tape, Tensor, Var};
use crate::dataio::ClipRecord;
use crate::metrics::AxisScores;
use crate::pseudovae::{self, EncodeError, EncoderConfig, LatentTensor};
use crate::quantizer::{causal_shift, AxisRanges, BinLabels};
use crate::NUM_AXES;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("latent/label mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (clips {clips:?}); last finite loss {last_loss}")]
    NonFinite {
        epoch: usize,
        step: usize,
        clips: Vec<usize>,
        last_loss: f64,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("data: {0}")]
    Data(String),
}

/// Architecture of the probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Input channels followed by each conv layer's output width.
    pub widths: Vec<usize>,
    pub kernel: [usize; 3],
    pub hidden: usize,
    pub bins: usize,
    /// Six independent trunks instead of one shared trunk.
    pub separate_trunks: bool,
    /// Initialization seed.
    pub seed: u64,
    /// Number of first-layer filters initialized as signed sums of a spatial
    /// gradient and a temporal difference (groups of 8); the rest are random.
    /// When nonzero, deeper conv layers start near the identity so these
    /// responses reach the pooled features intact.
    #[serde(default)]
    pub motion_filters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32],
            kernel: [3, 3, 3],
            hidden: 64,
            bins: crate::quantizer::DEFAULT_BINS,
            separate_trunks: false,
            seed: 0,
            motion_filters: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.bins < 2 {
            return Err(ProbeError::Config("K must be >= 2".into()));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) || self.hidden == 0 {
            return Err(ProbeError::Config("widths and hidden size must be positive, with at least one conv layer".into()));
        }
        if self.motion_filters % 8 != 0 || self.motion_filters > self.widths[1] {
            return Err(ProbeError::Config("motion_filters must be a multiple of 8 within the first layer width".into()));
        }
        if self.motion_filters > 0 && self.kernel.iter().any(|k| *k < 3) {
            return Err(ProbeError::Config("motion filters need kernel extent >= 3 on every axis".into()));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(ProbeError::Config("kernel sizes must be odd to preserve extent".into()));
        }
        Ok(())
    }

    fn trunks(&self) -> usize {
        if self.separate_trunks {
            NUM_AXES
        } else {
            1
        }
    }

    fn features(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Parameter names and shapes in storage order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [kt, kh, kw] = self.kernel;
        let mut out = Vec::new();
        for tr in 0..self.trunks() {
            for (l, pair) in self.widths.windows(2).enumerate() {
                out.push((format!("trunk{tr}.conv{l}.w"), vec![pair[1], pair[0], kt, kh, kw]));
                out.push((format!("trunk{tr}.conv{l}.b"), vec![pair[1]]));
            }
        }
        for j in 0..NUM_AXES {
            out.push((format!("head{j}.l1.w"), vec![self.hidden, self.features()]));
            out.push((format!("head{j}.l1.b"), vec![self.hidden]));
            out.push((format!("head{j}.l2.w"), vec![self.bins, self.hidden]));
            out.push((format!("head{j}.l2.b"), vec![self.bins]));
        }
        out
    }
}

/// Add a unit centre tap from input channel `i` to output channel `i`.
fn add_identity_taps(w: &mut Tensor) {
    let shape = w.shape().to_vec();
    let taps: usize = shape[2..].iter().product();
    let centre = taps / 2;
    let c_in = shape[1];
    for i in 0..shape[0].min(c_in) {
        w.data_mut()[(i * c_in + i) * taps + centre] += 1.0;
    }
}

/// For the upper half of `groups` motion groups, replace the identity rows
/// of the second conv layer with signed local flow derivatives of that
/// group's responses: curl, divergence and the temporal change of the
/// horizontal and vertical motion signals.
fn add_flow_derivative_filters(w: &mut Tensor, groups: usize) {
    let shape = w.shape().to_vec();
    let (c_out, c_in, kt, kh, kw) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if groups < 2 || c_out < 8 * groups || c_in < 8 * groups {
        return;
    }
    let (ct, cy, cx) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let taps = kt * kh * kw;
    let data = w.data_mut();
    for g in groups / 2..groups {
        let b = 8 * g;
        // Signed motion signals as (channel, weight) lists.
        let ex = [(b + 2, 1.0f32), (b + 3, 1.0), (b, -1.0), (b + 1, -1.0)];
        let ey = [(b + 6, 1.0f32), (b + 7, 1.0), (b + 4, -1.0), (b + 5, -1.0)];
        for r in 0..8 {
            let o = b + r;
            data[o * c_in * taps..(o + 1) * c_in * taps].iter_mut().for_each(|v| *v = 0.0);
            let sign = if r % 2 == 0 { 0.5 } else { -0.5 };
            // (signal, dt, dy, dx, weight) terms.
            let mut terms: Vec<(&[(usize, f32)], isize, isize, isize, f32)> = Vec::new();
            match r / 2 {
                0 => terms.extend([(&ey[..], 0, 0, 1, 1.0), (&ey[..], 0, 0, -1, -1.0), (&ex[..], 0, 1, 0, -1.0), (&ex[..], 0, -1, 0, 1.0)]),
                1 => terms.extend([(&ex[..], 0, 0, 1, 1.0), (&ex[..], 0, 0, -1, -1.0), (&ey[..], 0, 1, 0, 1.0), (&ey[..], 0, -1, 0, -1.0)]),
                2 => terms.extend([(&ex[..], 1, 0, 0, 1.0), (&ex[..], -1, 0, 0, -1.0)]),
                _ => terms.extend([(&ey[..], 1, 0, 0, 1.0), (&ey[..], -1, 0, 0, -1.0)]),
            }
            for (signal, dt, dy, dx, wgt) in terms {
                let tap = (((ct + dt) as usize * kh) + (cy + dy) as usize) * kw + (cx + dx) as usize;
                for &(c, cw) in signal {
                    data[(o * c_in + c) * taps + tap] += sign * wgt * cw;
                }
            }
        }
    }
}

/// Overwrite the first `count` filters of a conv weight `[out, in, kt, kh, kw]`.
/// Each group of 8 shares a random unit channel mix `u` and holds
/// `±(g_x ± d_t)` and `±(g_y ± d_t)`, where `g` is a central spatial
/// difference of `u·z` and `d_t` its central temporal difference. After a
/// ReLU and spatial pooling, differences of these responses track the
/// correlation between gradient and temporal change, i.e. image motion.
fn init_motion_filters(w: &mut Tensor, count: usize, rng: &mut ChaCha8Rng) {
    let shape = w.shape().to_vec();
    let (c_in, [kt, kh, kw]) = (shape[1], [shape[2], shape[3], shape[4]]);
    let (ct, cy, cx) = (kt / 2, kh / 2, kw / 2);
    let per_filter = c_in * kt * kh * kw;
    let at = |c: usize, t: usize, y: usize, x: usize| ((c * kt + t) * kh + y) * kw + x;
    let data = w.data_mut();
    for group in 0..count / 8 {
        let mut u: Vec<f32> = (0..c_in).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
        u.iter_mut().for_each(|v| *v /= norm);
        for r in 0..8 {
            let f = &mut data[(group * 8 + r) * per_filter..][..per_filter];
            f.iter_mut().for_each(|v| *v = 0.0);
            let along_x = r < 4;
            let outer = if r % 2 == 0 { 0.5 } else { -0.5 };
            let dt_sign = if (r / 2) % 2 == 0 { 1.0 } else { -1.0 };
            for (c, &uc) in u.iter().enumerate() {
                let (lo, hi) = if along_x {
                    (at(c, ct, cy, cx - 1), at(c, ct, cy, cx + 1))
                } else {
                    (at(c, ct, cy - 1, cx), at(c, ct, cy + 1, cx))
                };
                f[hi] += outer * uc;
                f[lo] -= outer * uc;
                f[at(c, ct + 1, cy, cx)] += outer * dt_sign * uc;
                f[at(c, ct - 1, cy, cx)] -= outer * dt_sign * uc;
            }
        }
    }
}

/// Metadata stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub train_seed: u64,
    pub encoder: Option<EncoderConfig>,
    pub ranges_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    tool_version: String,
    config: ProbeConfig,
    meta: ProbeMeta,
}

/// Probe parameters plus config.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub config: ProbeConfig,
    pub meta: ProbeMeta,
    params: ParamSet,
}

/// Per-axis logits, each `T_ℓ × K`.
pub type AxisLogits = [Tensor; NUM_AXES];

impl ProbeModel {
    /// Seeded initialization; the output layer of each head starts at zero.
    pub fn new(config: ProbeConfig) -> Result<Self, ProbeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let deep_conv = name.starts_with("trunk") && !name.contains(".conv0.") && name.ends_with(".w");
            let t = if name.ends_with(".b") || name.contains(".l2.") {
                Tensor::zeros(&shape)
            } else if deep_conv && config.motion_filters > 0 {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 0.1 * (6.0 / fan_in as f64).sqrt() as f32;
                let mut t = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
                add_identity_taps(&mut t);
                if name.contains(".conv1.") {
                    add_flow_derivative_filters(&mut t, config.motion_filters / 8);
                }
                t
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            };
            params.push(name, t);
        }
        for tr in 0..config.trunks() {
            let name = format!("trunk{tr}.conv0.w");
            let idx = params.iter().position(|(n, _)| n == name).expect("layout has conv0");
            init_motion_filters(params.tensor_mut(idx), config.motion_filters, &mut rng);
        }
        Ok(Self {
            config,
            meta: ProbeMeta::default(),
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Put the parameters on a tape; frozen use passes `trainable = false`.
    pub fn place(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.to_tape(tape, trainable)
    }

    /// Forward pass on a tape. `z` is C×T_ℓ×H_ℓ×W_ℓ; returns six T_ℓ×K logits.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &[Var], z: Var) -> Result<Vec<Var>, ProbeError> {
        let cfg = &self.config;
        let zs = tape.value(z).shape();
        if zs.len() != 4 || zs[0] != cfg.widths[0] {
            return Err(ProbeError::Shape(format!(
                "latent shape {zs:?}, probe expects {} channels",
                cfg.widths[0]
            )));
        }
        let feats = self.trunks_on_tape(tape, p, z)?;
        let layers = cfg.widths.len() - 1;
        let head0 = cfg.trunks() * layers * 2;
        let mut logits = Vec::with_capacity(NUM_AXES);
        for j in 0..NUM_AXES {
            let h = &p[head0 + 4 * j..head0 + 4 * j + 4];
            let f = feats[if cfg.separate_trunks { j } else { 0 }];
            let a = tape.linear(f, h[0], h[1])?;
            let a = tape.relu(a);
            logits.push(tape.linear(a, h[2], h[3])?);
        }
        Ok(logits)
    }

    /// Pooled trunk features, one `T_ℓ × F` node per trunk.
    fn trunks_on_tape(&self, tape: &mut Tape, p: &[Var], z: Var) -> Result<Vec<Var>, ProbeError> {
        let cfg = &self.config;
        let pad = cfg.kernel.map(|k| k / 2);
        let layers = cfg.widths.len() - 1;
        let mut feats = Vec::with_capacity(cfg.trunks());
        for tr in 0..cfg.trunks() {
            let mut x = z;
            for l in 0..layers {
                let base = (tr * layers + l) * 2;
                x = tape.conv3d(x, p[base], p[base + 1], [1, 1, 1], pad)?;
                x = tape.relu(x);
            }
            let pooled = tape.global_spatial_pool(x)?;
            feats.push(tape.transpose(pooled)?);
        }
        Ok(feats)
    }

    /// Rescale each head's first layer so it sees standardized trunk
    /// features over `examples`. Predictions of zero-output heads are
    /// unchanged; only the conditioning of the hidden layer improves.
    pub fn calibrate_heads(&mut self, examples: &[ProbeExample]) -> Result<(), ProbeError> {
        if examples.is_empty() {
            return Err(ProbeError::EmptySplit("calibration"));
        }
        let rows = crate::par::map_slice(examples, |ex| -> Result<Vec<Tensor>, ProbeError> {
            let mut tape = Tape::new();
            let p = self.place(&mut tape, false);
            let z = tape.constant(ex.latent.tensor().clone());
            let feats = self.trunks_on_tape(&mut tape, &p, z)?;
            Ok(feats.iter().map(|f| tape.value(*f).clone()).collect())
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let cfg = self.config.clone();
        let nf = cfg.features();
        let layers = cfg.widths.len() - 1;
        let head0 = cfg.trunks() * layers * 2;
        for tr in 0..cfg.trunks() {
            let (mut sum, mut sq, mut n) = (vec![0.0f64; nf], vec![0.0f64; nf], 0.0f64);
            for ex in &rows {
                for row in ex[tr].data().chunks(nf) {
                    for (k, v) in row.iter().enumerate() {
                        sum[k] += *v as f64;
                        sq[k] += (*v as f64).powi(2);
                    }
                    n += 1.0;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let s = (q / n - m * m).max(0.0).sqrt();
                    // Constant (dead) features keep their original scale.
                    if s > 1e-4 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            let heads: Vec<usize> = if cfg.separate_trunks { vec![tr] } else { (0..NUM_AXES).collect() };
            for j in heads {
                let (wi, bi) = (head0 + 4 * j, head0 + 4 * j + 1);
                let mut shift = vec![0.0f64; cfg.hidden];
                let w = self.params.tensor_mut(wi).data_mut();
                for (h, row) in w.chunks_mut(nf).enumerate() {
                    for k in 0..nf {
                        row[k] = (row[k] as f64 / std[k]) as f32;
                        shift[h] += row[k] as f64 * mean[k];
                    }
                }
                let b = self.params.tensor_mut(bi).data_mut();
                b.iter_mut().zip(&shift).for_each(|(v, s)| *v -= *s as f32);
            }
        }
        Ok(())
    }

    /// Frozen inference.
    pub fn forward(&self, z: &LatentTensor) -> Result<AxisLogits, ProbeError> {
        let mut tape = Tape::new();
        let p = self.place(&mut tape, false);
        let zv = tape.constant(z.tensor().clone());
        let out = self.forward_on_tape(&mut tape, &p, zv)?;
        Ok(std::array::from_fn(|j| tape.value(out[j]).clone()))
    }

    /// Argmax bins per axis and latent timestep.
    pub fn predict(&self, z: &LatentTensor) -> Result<BinLabels, ProbeError> {
        let logits = self.forward(z)?;
        let axes = std::array::from_fn(|j| argmax_rows(&logits[j]));
        BinLabels::new(axes).map_err(|e| ProbeError::Shape(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        let header = CheckpointHeader {
            kind: "probe".into(),
            tool_version: crate::TOOL_VERSION.into(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| ProbeError::Config(e.to_string()))?;
        autodiff::write_checkpoint(path, &json, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let (json, params) = autodiff::read_checkpoint(path)?;
        let header: CheckpointHeader = serde_json::from_str(&json)
            .map_err(|e| AutodiffError::Checkpoint(format!("probe header: {e}")))?;
        if header.kind != "probe" {
            return Err(AutodiffError::Checkpoint(format!("expected a probe checkpoint, found `{}`", header.kind)).into());
        }
        header.config.validate()?;
        let layout = header.config.layout();
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, pt))| n == pn && s.as_slice() == pt.shape());
        if !matches {
            return Err(AutodiffError::Checkpoint("parameter layout does not match probe config".into()).into());
        }
        if !params.all_finite() {
            return Err(AutodiffError::Checkpoint("non-finite probe parameters".into()).into());
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            params,
        })
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean over axes and timesteps of the per-timestep cross-entropy.
pub fn probe_loss_on_tape(tape: &mut Tape, logits: &[Var], labels: &BinLabels) -> Result<Var, ProbeError> {
    let mut total: Option<Var> = None;
    for (j, l) in logits.iter().enumerate() {
        let ce = tape.softmax_cross_entropy(*l, labels.axis(j))?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| ProbeError::Shape("no logits".into()))?;
    Ok(tape.scale(total, 1.0 / logits.len() as f32))
}

/// One latent with its pooled, causally aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub id: String,
    pub latent: LatentTensor,
    pub labels: BinLabels,
}

impl ProbeExample {
    pub fn new(id: impl Into<String>, latent: LatentTensor, labels: BinLabels) -> Result<Self, ProbeError> {
        if labels.len() != latent.dims()[1] {
            return Err(ProbeError::Shape(format!(
                "{} labels for {} latent timesteps",
                labels.len(),
                latent.dims()[1]
            )));
        }
        Ok(Self {
            id: id.into(),
            latent,
            labels,
        })
    }

    /// Encode a clip and derive labels: causal shift, then window pooling.
    pub fn from_record(rec: &ClipRecord, enc: &EncoderConfig, ranges: &AxisRanges) -> Result<Self, ProbeError> {
        let latent = pseudovae::encode(&rec.clip, enc)?;
        let actions = rec.actions().map_err(|e| ProbeError::Data(e.to_string()))?;
        let shifted = causal_shift(&actions).map_err(|e| ProbeError::Data(e.to_string()))?;
        let labels = pseudovae::label_pool(&shifted, ranges, enc.strides[0])?;
        Self::new(rec.id.clone(), latent, labels)
    }
}

/// Build examples for many records in parallel; order follows `records`.
pub fn make_examples(records: &[ClipRecord], enc: &EncoderConfig, ranges: &AxisRanges) -> Result<Vec<ProbeExample>, ProbeError> {
    crate::par::map_slice(records, |r| ProbeExample::from_record(r, enc, ranges))
        .into_iter()
        .collect()
}

/// Optimization settings for [`train_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 1e-3,
            batch: 8,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: AxisScores,
}

fn example_grads(model: &ProbeModel, ex: &ProbeExample) -> Result<(f64, Vec<Vec<f32>>), ProbeError> {
    let mut tape = Tape::new();
    let p = model.place(&mut tape, true);
    let z = tape.constant(ex.latent.tensor().clone());
    let logits = model.forward_on_tape(&mut tape, &p, z)?;
    let loss = probe_loss_on_tape(&mut tape, &logits, &ex.labels)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    Ok((value, model.params.collect_grads(&p, &grads)))
}

/// Train with AdamW; returns the epoch checkpoint with the best mean
/// validation accuracy (earliest on ties) and the per-epoch log.
pub fn train_probe(
    train: &[ProbeExample],
    val: &[ProbeExample],
    config: &ProbeConfig,
    tcfg: &ProbeTrainConfig,
) -> Result<(ProbeModel, Vec<EpochStats>), ProbeError> {
    if train.is_empty() {
        return Err(ProbeError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(ProbeError::EmptySplit("validation"));
    }
    if tcfg.batch == 0 {
        return Err(ProbeError::Config("batch must be >= 1".into()));
    }
    let mut model = ProbeModel::new(config.clone())?;
    model.calibrate_heads(train)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: tcfg.lr,
        weight_decay: tcfg.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut last_loss = f64::NAN;
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tcfg.batch) {
            let results = crate::par::map_slice(batch, |&i| example_grads(&model, &train[i]));
            let mut grads: Vec<Vec<f32>> = Vec::new();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                if grads.is_empty() {
                    grads = g;
                } else {
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let batch_loss = batch_loss / batch.len() as f64;
            if !batch_loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(ProbeError::NonFinite {
                    epoch,
                    step,
                    clips: batch.to_vec(),
                    last_loss,
                });
            }
            opt.step(&mut model.params, &grads)?;
            last_loss = batch_loss;
            loss_sum += batch_loss * batch.len() as f64;
            step += 1;
        }
        let acc = probe_accuracy(&model, val)?;
        log::info!(
            "probe epoch {epoch}: loss {:.4}, val acc {:.4}",
            loss_sum / train.len() as f64,
            acc.mean
        );
        if best.as_ref().map_or(true, |(b, _, _)| acc.mean > *b) {
            best = Some((acc.mean, epoch, model.params.clone()));
        }
        log.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy: acc,
        });
    }
    if let Some((acc, epoch, params)) = best {
        model.params = params;
        model.meta.best_epoch = epoch;
        model.meta.best_val_accuracy = acc;
    }
    model.meta.epochs_trained = tcfg.epochs;
    model.meta.train_seed = tcfg.seed;
    Ok((model, log))
}

/// Fraction of (clip, timestep) argmax hits per axis.
pub fn probe_accuracy(model: &ProbeModel, eval: &[ProbeExample]) -> Result<AxisScores, ProbeError> {
    if eval.is_empty() {
        return Err(ProbeError::EmptySplit("evaluation"));
    }
    let preds = crate::par::map_slice(eval, |ex| model.predict(&ex.latent));
    let mut hits = [0usize; NUM_AXES];
    let mut total = 0;
    for (p, ex) in preds.into_iter().zip(eval) {
        let p = p?;
        for (j, h) in hits.iter_mut().enumerate() {
            *h += p.axis(j).iter().zip(ex.labels.axis(j)).filter(|(a, b)| a == b).count();
        }
        total += ex.labels.len();
    }
    Ok(AxisScores::from_axes(hits.map(|h| h as f64 / total as f64)))
}

/// Per-axis frequency of the most common bin.
pub fn majority_baseline(labels: &[&BinLabels], bins: usize) -> Result<AxisScores, ProbeError> {
    let total: usize = labels.iter().map(|l| l.len()).sum();
    if total == 0 {
        return Err(ProbeError::EmptySplit("label"));
    }
    let mut per_axis = [0.0; NUM_AXES];
    for (j, out) in per_axis.iter_mut().enumerate() {
        let mut hist = vec![0usize; bins];
        for l in labels {
            for b in l.axis(j) {
                if *b >= bins {
                    return Err(ProbeError::Shape(format!("bin {b} >= K = {bins}")));
                }
                hist[*b] += 1;
            }
        }
        *out = *hist.iter().max().unwrap() as f64 / total as f64;
    }
    Ok(AxisScores::from_axes(per_axis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    fn small_config() -> ProbeConfig {
        ProbeConfig {
            widths: vec![4, 8, 5],
            hidden: 8,
            motion_filters: 8,
            ..Default::default()
        }
    }

    #[test]
    fn motion_filters_respond_to_direction() {
        let m = ProbeModel::new(small_config()).unwrap();
        let [c, t, h, w] = [4, 5, 8, 8];
        for v in [0.5f32, -0.5] {
            let z = Tensor::from_fn(&[c, t, h, w], |i| {
                let (ti, x) = ((i / (h * w)) % t, i % w);
                ((x as f32 - v * ti as f32) * 0.7).sin()
            });
            let mut tape = Tape::new();
            let p = m.place(&mut tape, false);
            let zv = tape.constant(z);
            let y = tape.conv3d(zv, p[0], p[1], [1, 1, 1], [1, 1, 1]).unwrap();
            let y = tape.relu(y);
            let pooled = tape.global_spatial_pool(y).unwrap();
            let out = tape.value(pooled);
            // Interior timestep, filters 0..4 cover the x direction.
            let e = |f: usize| out.data()[f * t + 2];
            let (plus, minus) = (e(0) + e(1), e(2) + e(3));
            if v > 0.0 {
                assert!(plus < minus, "{plus} {minus}");
            } else {
                assert!(plus > minus, "{plus} {minus}");
            }
        }
        assert!(ProbeModel::new(ProbeConfig { motion_filters: 4, ..small_config() }).is_err());
    }

    fn latent(seed: u64, dims: [usize; 4]) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0f32..1.0));
        LatentTensor::new(t, [1, 8, 8], [dims[1], dims[2] * 8, dims[3] * 8], 0).unwrap()
    }

    fn labels(seed: u64, t: usize, k: usize) -> BinLabels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BinLabels::new(std::array::from_fn(|_| (0..t).map(|_| rng.gen_range(0..k)).collect())).unwrap()
    }

    #[test]
    fn untrained_probe_has_uniform_logits() {
        let m = ProbeModel::new(ProbeConfig::default()).unwrap();
        let z = latent(1, [16, 5, 4, 4]);
        let logits = m.forward(&z).unwrap();
        assert!(logits.iter().all(|l| l.shape() == [5, 7] && l.data().iter().all(|v| *v == 0.0)));
        let mut tape = Tape::new();
        let p = m.place(&mut tape, false);
        let zv = tape.constant(z.tensor().clone());
        let out = m.forward_on_tape(&mut tape, &p, zv).unwrap();
        let loss = probe_loss_on_tape(&mut tape, &out, &labels(2, 5, 7)).unwrap();
        assert!((tape.value(loss).data()[0] - 7f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn forward_is_deterministic_and_checks_channels() {
        let mut m = ProbeModel::new(small_config()).unwrap();
        // Non-zero heads so logits depend on the input.
        let i = m.params.len() - 2;
        m.params.tensor_mut(i).data_mut().iter_mut().enumerate().for_each(|(k, v)| *v = (k as f32 * 0.37).sin());
        let z = latent(3, [4, 6, 3, 3]);
        assert_eq!(m.forward(&z).unwrap(), m.forward(&z).unwrap());
        assert!(m.forward(&latent(3, [5, 6, 3, 3])).is_err());
    }

    #[test]
    fn probe_is_differentiable_in_the_latent() {
        let mut m = ProbeModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..m.params.len() {
            m.params.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3f32..0.3));
        }
        let y = labels(6, 4, 7);
        let z = latent(7, [4, 4, 3, 3]).into_tensor();
        let r = check_gradients(
            &[z],
            |tape, v| {
                let p = m.place(tape, false);
                let out = m.forward_on_tape(tape, &p, v[0]).map_err(|e| AutodiffError::Shape(e.to_string()))?;
                probe_loss_on_tape(tape, &out, &y).map_err(|e| AutodiffError::Shape(e.to_string()))
            },
            1e-3,
            40,
            8,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
    }

    #[test]
    fn memorizes_two_clips() {
        let train: Vec<ProbeExample> = (0..2)
            .map(|i| ProbeExample::new(format!("c{i}"), latent(10 + i, [4, 5, 2, 2]), labels(20 + i, 5, 7)).unwrap())
            .collect();
        let tcfg = ProbeTrainConfig {
            epochs: 200,
            lr: 1e-2,
            batch: 2,
            weight_decay: 0.0,
            seed: 1,
        };
        let (m, log) = train_probe(&train, &train, &small_config(), &tcfg).unwrap();
        assert_eq!(log.len(), 200);
        let acc = probe_accuracy(&m, &train).unwrap();
        assert_eq!(acc.mean, 1.0, "{acc:?}");
        assert_eq!(m.meta.best_val_accuracy, 1.0);
    }

    #[test]
    fn training_is_reproducible() {
        let data: Vec<ProbeExample> = (0..5)
            .map(|i| ProbeExample::new(format!("c{i}"), latent(30 + i, [4, 4, 2, 2]), labels(40 + i, 4, 7)).unwrap())
            .collect();
        let tcfg = ProbeTrainConfig {
            epochs: 3,
            batch: 2,
            seed: 9,
            ..Default::default()
        };
        let (a, la) = train_probe(&data[..3], &data[3..], &small_config(), &tcfg).unwrap();
        let (b, lb) = train_probe(&data[..3], &data[3..], &small_config(), &tcfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(la, lb);
        assert!(train_probe(&[], &data, &small_config(), &tcfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.ckpt");
        let mut m = ProbeModel::new(ProbeConfig {
            separate_trunks: true,
            ..small_config()
        })
        .unwrap();
        m.meta.best_epoch = 3;
        m.save(&path).unwrap();
        let back = ProbeModel::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn accuracy_of_a_perfect_predictor_is_one() {
        // An untrained probe predicts bin 0 everywhere.
        let m = ProbeModel::new(small_config()).unwrap();
        let zero = BinLabels::new(std::array::from_fn(|_| vec![0; 4])).unwrap();
        let ex = ProbeExample::new("a", latent(1, [4, 4, 2, 2]), zero).unwrap();
        assert_eq!(probe_accuracy(&m, &[ex]).unwrap().mean, 1.0);
    }

    #[test]
    fn majority_baseline_cases() {
        let uniform = BinLabels::new(std::array::from_fn(|_| (0..7).collect())).unwrap();
        let b = majority_baseline(&[&uniform], 7).unwrap();
        assert!(b.per_axis.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
        let one = BinLabels::new(std::array::from_fn(|_| vec![3; 9])).unwrap();
        assert_eq!(majority_baseline(&[&one], 7).unwrap().mean, 1.0);
        // Histogram oracle over two sequences.
        let a = labels(50, 30, 7);
        let c = labels(51, 20, 7);
        let got = majority_baseline(&[&a, &c], 7).unwrap();
        for j in 0..6 {
            let mut counts = [0usize; 7];
            a.axis(j).iter().chain(c.axis(j)).for_each(|b| counts[*b] += 1);
            assert_eq!(got.per_axis[j], *counts.iter().max().unwrap() as f64 / 50.0);
        }
    }
}
