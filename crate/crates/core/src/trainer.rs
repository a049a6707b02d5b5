//! Action-conditioned latent rollout model trained with reconstruction loss
//! plus a frozen-probe cross-entropy term.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AdamW, AdamWConfig, AutodiffError, ParamSet, Tape, Tensor, Var};
use crate::dataio::ActionSequence;
use crate::metrics::{aas_from_bins, command_bins, pcr_from_bins, MetricsError, MetricsReport};
use crate::probe::{probe_loss_on_tape, ProbeError, ProbeModel};
use crate::pseudovae::{pool_actions, EncodeError, LatentTensor};
use crate::quantizer::{causal_shift, AxisRanges, BinLabels};
use crate::NUM_AXES;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}: l_rec={l_rec}, l_probe={l_probe}")]
    NonFinite { step: usize, l_rec: f64, l_probe: f64 },
    #[error("frozen probe parameters changed during training ({before} -> {after})")]
    ProbeMutated { before: String, after: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Generator architecture and schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub embed: usize,
    pub hidden: usize,
    pub lambda_phys: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    /// Write a log row every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 64,
            lambda_phys: 0.2,
            warmup_steps: 500,
            total_steps: 5000,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            log_every: 10,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda_phys >= 0.0) || !self.lambda_phys.is_finite() {
            return Err(TrainError::Config("lambda_phys must be finite and >= 0".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config("warmup_steps must not exceed total_steps".into()));
        }
        if self.embed == 0 || self.hidden == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(TrainError::Config("widths, batch and log interval must be positive".into()));
        }
        Ok(())
    }

    /// Probe weight in effect at `step` (0-based).
    pub fn lambda_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            0.0
        } else {
            self.lambda_phys
        }
    }
}

/// Latent frame geometry and action normalization the model was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenShape {
    /// (C, H_ℓ, W_ℓ).
    pub frame: [usize; 3],
    pub temporal_stride: usize,
    pub action_center: [f64; NUM_AXES],
    pub action_scale: [f64; NUM_AXES],
}

impl GenShape {
    pub fn new(frame: [usize; 3], temporal_stride: usize, ranges: &AxisRanges) -> Self {
        Self {
            frame,
            temporal_stride,
            action_center: std::array::from_fn(|j| 0.5 * (ranges[j].min() + ranges[j].max())),
            action_scale: std::array::from_fn(|j| 0.5 * (ranges[j].max() - ranges[j].min())),
        }
    }

    fn frame_len(&self) -> usize {
        self.frame.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenHeader {
    kind: String,
    tool_version: String,
    config: GenConfig,
    shape: GenShape,
}

/// Action embedding MLP plus residual latent update network.
#[derive(Debug, Clone, PartialEq)]
pub struct GenModel {
    pub config: GenConfig,
    pub shape: GenShape,
    params: ParamSet,
}

const EMB_W1: usize = 0;
const EMB_B1: usize = 1;
const EMB_W2: usize = 2;
const EMB_B2: usize = 3;
const F_W1: usize = 4;
const F_B1: usize = 5;
const F_W2: usize = 6;
const F_B2: usize = 7;

fn layout(cfg: &GenConfig, shape: &GenShape) -> Vec<(&'static str, Vec<usize>)> {
    let (e, h, d) = (cfg.embed, cfg.hidden, shape.frame_len());
    vec![
        ("emb.l1.w", vec![e, NUM_AXES]),
        ("emb.l1.b", vec![e]),
        ("emb.l2.w", vec![e, e]),
        ("emb.l2.b", vec![e]),
        ("f.l1.w", vec![h, d + e]),
        ("f.l1.b", vec![h]),
        ("f.l2.w", vec![d, h]),
        ("f.l2.b", vec![d]),
    ]
}

impl GenModel {
    /// Seeded initialization; the last update layer starts at zero so an
    /// untrained model rolls out a constant latent.
    pub fn new(config: GenConfig, shape: GenShape) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6E6E);
        let mut params = ParamSet::new();
        for (name, dims) in layout(&config, &shape) {
            let t = if name.ends_with(".b") || name.starts_with("f.l2") {
                Tensor::zeros(&dims)
            } else {
                let bound = (3.0 / dims[1] as f64).sqrt() as f32;
                Tensor::from_fn(&dims, |_| rng.gen_range(-bound..bound))
            };
            params.push(name, t);
        }
        Ok(Self {
            config,
            shape,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Normalized, causally aligned, pooled conditioning rows (T_ℓ × 6).
    pub fn conditioning(&self, commanded: &ActionSequence) -> Result<Tensor, TrainError> {
        let shifted = causal_shift(commanded).map_err(|e| TrainError::Shape(e.to_string()))?;
        let pooled = pool_actions(&shifted, self.shape.temporal_stride)?;
        let data = pooled
            .iter()
            .flat_map(|r| {
                (0..NUM_AXES).map(|j| ((r[j] - self.shape.action_center[j]) / self.shape.action_scale[j]) as f32)
            })
            .collect();
        Ok(Tensor::new(vec![pooled.len(), NUM_AXES], data)?)
    }

    /// Roll out on a tape: returns the C×T_ℓ×H_ℓ×W_ℓ prediction.
    pub fn rollout_on_tape(&self, tape: &mut Tape, p: &[Var], z_first: Var, cond: Var) -> Result<Var, TrainError> {
        let d = self.shape.frame_len();
        if tape.value(z_first).numel() != d {
            return Err(TrainError::Shape(format!(
                "first latent has {} values, model expects {d}",
                tape.value(z_first).numel()
            )));
        }
        let steps = tape.value(cond).shape()[0];
        let h = tape.linear(cond, p[EMB_W1], p[EMB_B1])?;
        let h = tape.relu(h);
        let emb = tape.linear(h, p[EMB_W2], p[EMB_B2])?;
        let mut z = tape.reshape(z_first, &[1, d])?;
        let mut frames = vec![z];
        for t in 0..steps.saturating_sub(1) {
            let e = tape.select_row(emb, t)?;
            let x = tape.concat_cols(&[z, e])?;
            let a = tape.linear(x, p[F_W1], p[F_B1])?;
            let a = tape.tanh(a);
            let delta = tape.linear(a, p[F_W2], p[F_B2])?;
            z = tape.add(z, delta)?;
            frames.push(z);
        }
        Ok(tape.stack_time(&frames, self.shape.frame)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let header = GenHeader {
            kind: "generator".into(),
            tool_version: crate::TOOL_VERSION.into(),
            config: self.config,
            shape: self.shape.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| TrainError::Config(e.to_string()))?;
        autodiff::write_checkpoint(path, &json, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (json, params) = autodiff::read_checkpoint(path)?;
        let header: GenHeader = serde_json::from_str(&json)
            .map_err(|e| AutodiffError::Checkpoint(format!("generator header: {e}")))?;
        if header.kind != "generator" {
            return Err(AutodiffError::Checkpoint(format!("expected a generator checkpoint, found `{}`", header.kind)).into());
        }
        let expected = layout(&header.config, &header.shape);
        let ok = expected.len() == params.len()
            && expected
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, pt))| n == &pn && s.as_slice() == pt.shape());
        if !ok || !params.all_finite() {
            return Err(AutodiffError::Checkpoint("generator parameters do not match config".into()).into());
        }
        Ok(Self {
            config: header.config,
            shape: header.shape,
            params,
        })
    }
}

/// Autoregressive rollout from the first latent timestep.
pub fn gen_forward(model: &GenModel, z_first: &[f32], commanded: &ActionSequence, source: &LatentTensor) -> Result<LatentTensor, TrainError> {
    let mut tape = Tape::new();
    let p = model.params.to_tape(&mut tape, false);
    let z0 = tape.constant(Tensor::new(vec![z_first.len()], z_first.to_vec())?);
    let cond = tape.constant(model.conditioning(commanded)?);
    let out = model.rollout_on_tape(&mut tape, &p, z0, cond)?;
    Ok(LatentTensor::new(
        tape.value(out).clone(),
        source.strides(),
        source.source_dims(),
        source.seed(),
    )?)
}

/// Roll out from a ground-truth latent's first timestep.
pub fn rollout(model: &GenModel, z: &LatentTensor, commanded: &ActionSequence) -> Result<LatentTensor, TrainError> {
    gen_forward(model, &z.frame(0), commanded, z)
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GenExample {
    pub id: String,
    pub latent: LatentTensor,
    /// Per-frame commanded actions (unshifted).
    pub actions: ActionSequence,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_rec: f64,
    pub l_probe: f64,
    pub lambda: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,l_rec,l_probe,lambda,total";

pub fn render_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_rec, r.l_probe, r.lambda, r.total));
    }
    s
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), TrainError> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(render_log(rows).as_bytes()))
        .map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
}

struct Prepared<'a> {
    ex: &'a GenExample,
    cond: Tensor,
    bins: BinLabels,
}

struct StepOut {
    l_rec: f64,
    l_probe: Option<f64>,
    total: f64,
    grads: Vec<Vec<f32>>,
}

fn example_step(model: &GenModel, probe: &ProbeModel, item: &Prepared, lambda: f32, want_probe: bool) -> Result<StepOut, TrainError> {
    let mut tape = Tape::new();
    let p = model.params.to_tape(&mut tape, true);
    let first = item.ex.latent.frame(0);
    let z0 = tape.constant(Tensor::new(vec![first.len()], first)?);
    let cond = tape.constant(item.cond.clone());
    let pred = model.rollout_on_tape(&mut tape, &p, z0, cond)?;
    let l_rec = tape.mse(pred, item.ex.latent.tensor())?;
    let mut total = l_rec;
    let mut l_probe = None;
    if lambda > 0.0 || want_probe {
        // Probe weights enter as constants: no gradient reaches them.
        let pp = probe.place(&mut tape, false);
        let logits = probe.forward_on_tape(&mut tape, &pp, pred)?;
        let lp = probe_loss_on_tape(&mut tape, &logits, &item.bins)?;
        l_probe = Some(tape.value(lp).data()[0] as f64);
        if lambda > 0.0 {
            let weighted = tape.scale(lp, lambda);
            total = tape.add(l_rec, weighted)?;
        }
    }
    let grads = tape.backward(total)?;
    Ok(StepOut {
        l_rec: tape.value(l_rec).data()[0] as f64,
        l_probe,
        total: tape.value(total).data()[0] as f64,
        grads: model.params.collect_grads(&p, &grads),
    })
}

/// Train the generator against a frozen probe. Returns the model and the
/// log rows.
pub fn train_generator(
    data: &[GenExample],
    probe: &ProbeModel,
    ranges: &AxisRanges,
    config: &GenConfig,
) -> Result<(GenModel, Vec<LogRow>), TrainError> {
    config.validate()?;
    let first = data.first().ok_or(TrainError::Empty("training"))?;
    let [c, _, h, w] = first.latent.dims();
    let s_t = first.latent.strides()[0];
    let shape = GenShape::new([c, h, w], s_t, ranges);
    let mut model = GenModel::new(*config, shape)?;
    let before = probe.checksum();

    let prepared = data
        .iter()
        .map(|ex| {
            if ex.latent.dims() != [c, ex.latent.dims()[1], h, w] {
                return Err(TrainError::Shape(format!("clip {} has latent {:?}", ex.id, ex.latent.dims())));
            }
            let bins = command_bins(&ex.actions, ranges, s_t)?;
            if bins.len() != ex.latent.dims()[1] {
                return Err(TrainError::Shape(format!("clip {}: actions do not cover the latent", ex.id)));
            }
            Ok(Prepared {
                ex,
                cond: model.conditioning(&ex.actions)?,
                bins,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    for step in 0..config.total_steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }
        let lambda = config.lambda_at(step);
        let logging = step % config.log_every == 0 || step + 1 == config.total_steps;
        let outs = crate::par::map_slice(&batch, |&i| example_step(&model, probe, &prepared[i], lambda, logging));
        let n = batch.len() as f64;
        let (mut l_rec, mut l_probe, mut total) = (0.0, 0.0, 0.0);
        let mut grads: Vec<Vec<f32>> = Vec::new();
        for o in outs {
            let o = o?;
            l_rec += o.l_rec / n;
            l_probe += o.l_probe.unwrap_or(0.0) / n;
            total += o.total / n;
            if grads.is_empty() {
                grads = o.grads;
            } else {
                for (a, g) in grads.iter_mut().zip(&o.grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step, l_rec, l_probe });
        }
        let inv = 1.0 / batch.len() as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        opt.step(&mut model.params, &grads)?;
        if logging {
            log.push(LogRow {
                step,
                l_rec,
                l_probe,
                lambda: lambda as f64,
                total,
            });
            log::debug!("gen step {step}: l_rec {l_rec:.5} l_probe {l_probe:.5} total {total:.5}");
        }
    }
    let after = probe.checksum();
    assert_eq!(before, after, "frozen probe parameters changed during generator training");
    if before != after {
        return Err(TrainError::ProbeMutated { before, after });
    }
    Ok((model, log))
}

/// Score rollouts with the frozen probe: AAS against the commanded bins and
/// PCR of the predicted bins. Clips are scored in `ids` order.
pub fn eval_rollouts(
    probe: &ProbeModel,
    ranges: &AxisRanges,
    rollouts: &[(String, LatentTensor, ActionSequence)],
    method: &str,
    seed: u64,
    config_fingerprint: &str,
) -> Result<MetricsReport, TrainError> {
    if rollouts.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let scored = crate::par::map_slice(rollouts, |(_, z, acts)| -> Result<(BinLabels, BinLabels), TrainError> {
        let pred = probe.predict(z)?;
        let target = command_bins(acts, ranges, z.strides()[0])?;
        Ok((pred, target))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let aas = aas_from_bins(&scored)?;
    let preds: Vec<BinLabels> = scored.into_iter().map(|(p, _)| p).collect();
    let pcr = pcr_from_bins(&preds)?;
    Ok(MetricsReport {
        method: method.into(),
        tool_version: crate::TOOL_VERSION.into(),
        seed,
        config_fingerprint: config_fingerprint.into(),
        clip_ids: rollouts.iter().map(|r| r.0.clone()).collect(),
        aas,
        pcr,
        flow_imu_r: None,
    })
}

/// Roll out every evaluation clip from its first latent and score it.
pub fn eval_generator(
    model: &GenModel,
    probe: &ProbeModel,
    ranges: &AxisRanges,
    eval: &[GenExample],
    method: &str,
) -> Result<MetricsReport, TrainError> {
    let rollouts = crate::par::map_slice(eval, |ex| {
        rollout(model, &ex.latent, &ex.actions).map(|z| (ex.id.clone(), z, ex.actions.clone()))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let fp = crate::fingerprint(&(model.config, &model.shape));
    eval_rollouts(probe, ranges, &rollouts, method, model.config.seed, &fp)
}
