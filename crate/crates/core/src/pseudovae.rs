//! Fixed stand-in encoder from RGB clips to latent tensors.
//!
//! Every `s_t×s_h×s_w×3` patch is flattened and projected by a seeded random
//! matrix with orthonormal rows, then standardized per channel.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataio::{ActionSequence, VideoClip};
use crate::quantizer::{quantize, AxisRanges, BinLabels, QuantError};
use crate::NUM_AXES;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("clip {width}x{height} is not divisible by spatial strides {s_h}x{s_w}")]
    Dimension {
        width: usize,
        height: usize,
        s_h: usize,
        s_w: usize,
    },
    #[error("latent file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Projection and normalization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    /// (s_t, s_h, s_w).
    pub strides: [usize; 3],
    pub seed: u64,
    /// Per-channel mean subtracted after projection.
    pub mean: Vec<f32>,
    /// Per-channel scale divided out after centering.
    pub std: Vec<f32>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::new(16, [1, 8, 8], 0)
    }
}

impl EncoderConfig {
    /// Config with identity normalization.
    pub fn new(channels: usize, strides: [usize; 3], seed: u64) -> Self {
        Self {
            channels,
            strides,
            seed,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn patch_len(&self) -> usize {
        3 * self.strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.strides.contains(&0) {
            return Err(EncodeError::Config("strides must be >= 1".into()));
        }
        if self.channels == 0 || self.channels > self.patch_len() {
            return Err(EncodeError::Config(format!(
                "channels must be in 1..={} for strides {:?}",
                self.patch_len(),
                self.strides
            )));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(EncodeError::Config("normalization stats do not match channels".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(EncodeError::Config("normalization stats must be finite with std > 0".into()));
        }
        Ok(())
    }

    /// Row-major `channels × patch_len` matrix with orthonormal rows.
    pub fn projection(&self) -> Vec<f32> {
        let d = self.patch_len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x00E1_C0DE);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(self.channels);
        while rows.len() < self.channels {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Two Gram-Schmidt passes keep the rows orthogonal to f64 precision.
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows.push(v);
            }
        }
        rows.into_iter().flatten().map(|a| a as f32).collect()
    }

    /// Latent extent (T_ℓ, H_ℓ, W_ℓ) for a clip of `frames×height×width`.
    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 3], EncodeError> {
        let [st, sh, sw] = self.strides;
        if height % sh != 0 || width % sw != 0 || frames == 0 {
            return Err(EncodeError::Dimension {
                width,
                height,
                s_h: sh,
                s_w: sw,
            });
        }
        Ok([frames.div_ceil(st), height / sh, width / sw])
    }
}

/// Encoded clip: C×T_ℓ×H_ℓ×W_ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Tensor,
    strides: [usize; 3],
    source: [usize; 3],
    seed: u64,
}

impl LatentTensor {
    pub fn new(data: Tensor, strides: [usize; 3], source: [usize; 3], seed: u64) -> Result<Self, EncodeError> {
        if data.shape().len() != 4 {
            return Err(EncodeError::Format(format!("latent must be 4-D, got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(EncodeError::Format("latent has non-finite entries".into()));
        }
        Ok(Self {
            data,
            strides,
            source,
            seed,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// (C, T_ℓ, H_ℓ, W_ℓ).
    pub fn dims(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn strides(&self) -> [usize; 3] {
        self.strides
    }

    /// Source clip extent (T, H, W).
    pub fn source_dims(&self) -> [usize; 3] {
        self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Latent timestep `t` as channel-major C×H_ℓ×W_ℓ values.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        let [c, tl, h, w] = self.dims();
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            out.extend_from_slice(&self.data.data()[(ch * tl + t) * plane..][..plane]);
        }
        out
    }

    pub fn squared_distance(&self, other: &LatentTensor) -> f64 {
        self.data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum()
    }
}

/// Project every patch without normalization: C×T_ℓ×H_ℓ×W_ℓ values.
pub fn project(clip: &VideoClip, cfg: &EncoderConfig) -> Result<Tensor, EncodeError> {
    cfg.validate()?;
    let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
    let [tl, hl, wl] = cfg.latent_dims(t, h, w)?;
    let [st, sh, sw] = cfg.strides;
    let c = cfg.channels;
    let d = cfg.patch_len();
    let proj = cfg.projection();
    let positions = tl * hl * wl;

    // Patches as a d × positions matrix, then one GEMM.
    let mut patches = vec![0.0f32; d * positions];
    for lt in 0..tl {
        for ly in 0..hl {
            for lx in 0..wl {
                let pos = (lt * hl + ly) * wl + lx;
                let mut k = 0;
                for dt in 0..st {
                    // Edge replication past the last frame.
                    let frame = clip.frame((lt * st + dt).min(t - 1));
                    for dy in 0..sh {
                        let row = (ly * sh + dy) * w;
                        for dx in 0..sw {
                            let px = (row + lx * sw + dx) * 3;
                            for ch in 0..3 {
                                patches[k * positions + pos] = frame[px + ch] as f32 / 255.0;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f32; c * positions];
    crate::autodiff::gemm(c, d, positions, &proj, false, &patches, false, 0.0, &mut out);
    Tensor::new(vec![c, tl, hl, wl], out).map_err(|e| EncodeError::Format(e.to_string()))
}

/// Encode a clip with the standardization stored in `cfg`.
pub fn encode(clip: &VideoClip, cfg: &EncoderConfig) -> Result<LatentTensor, EncodeError> {
    let mut z = project(clip, cfg)?;
    let s = z.shape().to_vec();
    let per_channel = s[1] * s[2] * s[3];
    for (ch, block) in z.data_mut().chunks_mut(per_channel).enumerate() {
        let (m, sd) = (cfg.mean[ch], cfg.std[ch]);
        block.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
    LatentTensor::new(
        z,
        cfg.strides,
        [clip.num_frames(), clip.height(), clip.width()],
        cfg.seed,
    )
}

/// Copy of `cfg` with per-channel mean and std fitted over `clips`.
pub fn fit_stats(clips: &[&VideoClip], cfg: &EncoderConfig) -> Result<EncoderConfig, EncodeError> {
    if clips.is_empty() {
        return Err(EncodeError::Config("no clips to fit normalization stats".into()));
    }
    let base = EncoderConfig::new(cfg.channels, cfg.strides, cfg.seed);
    let projected = crate::par::map_slice(clips, |c| project(c, &base));
    let c = cfg.channels;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0usize;
    for z in projected {
        let z = z?;
        let per = z.numel() / c;
        for (ch, block) in z.data().chunks(per).enumerate() {
            for v in block {
                sum[ch] += *v as f64;
                sq[ch] += (*v as f64).powi(2);
            }
        }
        count += per;
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    Ok(EncoderConfig { mean, std, ..base })
}

/// Mean action over each window of `s_t` frames; the last window is padded
/// by repeating the final frame.
pub fn pool_actions(actions: &ActionSequence, s_t: usize) -> Result<Vec<[f64; NUM_AXES]>, EncodeError> {
    if s_t == 0 {
        return Err(EncodeError::Config("temporal stride must be >= 1".into()));
    }
    let rows = actions.rows();
    let t = rows.len();
    Ok((0..t.div_ceil(s_t))
        .map(|l| {
            std::array::from_fn(|j| {
                (0..s_t).map(|k| rows[(l * s_t + k).min(t - 1)][j]).sum::<f64>() / s_t as f64
            })
        })
        .collect())
}

/// Labels at latent resolution: the quantized window mean of the actions.
pub fn label_pool(actions: &ActionSequence, ranges: &AxisRanges, s_t: usize) -> Result<BinLabels, EncodeError> {
    let pooled = pool_actions(actions, s_t)?;
    let mut axes: [Vec<usize>; NUM_AXES] = Default::default();
    for (j, axis) in axes.iter_mut().enumerate() {
        for row in &pooled {
            axis.push(quantize(row[j], &ranges[j])?);
        }
    }
    Ok(BinLabels::new(axes)?)
}

const LATENT_MAGIC: &[u8; 8] = b"AKLAT001";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncodeError + '_ {
    move |source| EncodeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Cache a latent as header (dims, strides, source dims, seed) + LE f32 data.
pub fn write_latent(path: &Path, z: &LatentTensor) -> Result<(), EncodeError> {
    let mut buf = Vec::with_capacity(64 + z.data.numel() * 4);
    buf.extend_from_slice(LATENT_MAGIC);
    for v in z.dims().iter().chain(&z.strides).chain(&z.source) {
        buf.extend_from_slice(&(*v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&z.seed.to_le_bytes());
    for v in z.data.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(io_err(path))
}

pub fn read_latent(path: &Path) -> Result<LatentTensor, EncodeError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    let header = 8 + 10 * 4 + 8;
    if buf.len() < header || &buf[..8] != LATENT_MAGIC {
        return Err(EncodeError::Format(format!("{}: bad header", path.display())));
    }
    let u = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let dims = [u(0), u(1), u(2), u(3)];
    let strides = [u(4), u(5), u(6)];
    let source = [u(7), u(8), u(9)];
    let seed = u64::from_le_bytes(buf[48..56].try_into().unwrap());
    let n: usize = dims.iter().product();
    if buf.len() != header + 4 * n {
        return Err(EncodeError::Format(format!("{}: size does not match header", path.display())));
    }
    let data = buf[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(dims.to_vec(), data).map_err(|e| EncodeError::Format(e.to_string()))?;
    LatentTensor::new(t, strides, source, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::AxisRange;

    fn clip_from(frames: usize, w: usize, h: usize, f: impl Fn(usize, usize, usize, usize) -> u8) -> VideoClip {
        let mut px = Vec::with_capacity(frames * w * h * 3);
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        px.push(f(t, y, x, c));
                    }
                }
            }
        }
        VideoClip::new(w, h, 30.0, 0.0, px).unwrap()
    }

    fn noise_clip(seed: usize) -> VideoClip {
        clip_from(5, 16, 16, |t, y, x, c| (((t * 31 + y * 17 + x * 7 + c * 3) * 2654435761 + seed * 977) % 101) as u8)
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        for cfg in [EncoderConfig::default(), EncoderConfig::new(16, [4, 8, 8], 9)] {
            let p = cfg.projection();
            let (c, d) = (cfg.channels, cfg.patch_len());
            for i in 0..c {
                for j in 0..c {
                    let dot: f32 = (0..d).map(|k| p[i * d + k] * p[j * d + k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-5, "({i},{j}) = {dot}");
                }
            }
        }
    }

    #[test]
    fn latent_shape_follows_strides() {
        let cfg = EncoderConfig::new(8, [4, 8, 8], 1);
        let clip = noise_clip(0);
        let z = encode(&clip, &cfg).unwrap();
        assert_eq!(z.dims(), [8, 2, 2, 2]);
        assert_eq!(z.source_dims(), [5, 16, 16]);
        let bad = clip_from(2, 12, 16, |_, _, _, _| 0);
        assert!(matches!(encode(&bad, &cfg), Err(EncodeError::Dimension { .. })));
    }

    #[test]
    fn identical_clips_give_identical_latents() {
        let cfg = EncoderConfig::new(16, [1, 8, 8], 3);
        assert_eq!(encode(&noise_clip(2), &cfg).unwrap(), encode(&noise_clip(2), &cfg).unwrap());
        assert!(encode(&noise_clip(2), &cfg).unwrap().squared_distance(&encode(&noise_clip(3), &cfg).unwrap()) > 0.0);
    }

    #[test]
    fn static_clip_is_constant_in_time() {
        let clip = clip_from(6, 16, 16, |_, y, x, c| (y * 13 + x * 5 + c) as u8);
        let z = encode(&clip, &EncoderConfig::default()).unwrap();
        for t in 1..6 {
            assert_eq!(z.frame(t), z.frame(0));
        }
    }

    #[test]
    fn projection_is_affine_in_pixels() {
        let cfg = EncoderConfig::new(16, [1, 8, 8], 5);
        let base = clip_from(3, 16, 16, |t, y, x, c| ((t + y * 3 + x * 5 + c) % 100) as u8);
        let moved = clip_from(3, 16, 16, |t, y, x, c| 2 * ((t + y * 3 + x * 5 + c) % 100) as u8 + 10);
        let za = project(&base, &cfg).unwrap();
        let zb = project(&moved, &cfg).unwrap();
        let p = cfg.projection();
        let d = cfg.patch_len();
        let per = za.numel() / cfg.channels;
        for ch in 0..cfg.channels {
            let row_sum: f32 = p[ch * d..(ch + 1) * d].iter().sum();
            let offset = row_sum * 10.0 / 255.0;
            for i in 0..per {
                let want = 2.0 * za.data()[ch * per + i] + offset;
                assert!((zb.data()[ch * per + i] - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn fitted_stats_standardize_the_fit_set() {
        let clips = [noise_clip(0), noise_clip(1), noise_clip(2)];
        let refs: Vec<&VideoClip> = clips.iter().collect();
        let cfg = fit_stats(&refs, &EncoderConfig::default()).unwrap();
        let zs: Vec<LatentTensor> = clips.iter().map(|c| encode(c, &cfg).unwrap()).collect();
        let per = zs[0].tensor().numel() / 16;
        for ch in 0..16 {
            let vals: Vec<f64> = zs
                .iter()
                .flat_map(|z| z.tensor().data()[ch * per..(ch + 1) * per].iter().map(|v| *v as f64))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-3, "channel {ch}: {m} {v}");
        }
    }

    #[test]
    fn latent_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let z = encode(&noise_clip(4), &EncoderConfig::new(8, [2, 8, 8], 11)).unwrap();
        write_latent(&path, &z).unwrap();
        assert_eq!(read_latent(&path).unwrap(), z);
    }

    fn ranges() -> AxisRanges {
        std::array::from_fn(|_| AxisRange::new(-1.0, 1.0, 7).unwrap())
    }

    #[test]
    fn pooled_window_mean_is_requantized() {
        let acts = ActionSequence::new(vec![[0.1; 6], [0.3; 6]], 30.0).unwrap();
        let l = label_pool(&acts, &ranges(), 2).unwrap();
        assert_eq!(l.len(), 1);
        // mean 0.2 → floor(1.2/2·7) = 4
        assert!((0..6).all(|j| l.get(j, 0) == 4));
    }

    #[test]
    fn unit_stride_pooling_is_plain_quantization() {
        let rows: Vec<[f64; 6]> = (0..9).map(|i| [i as f64 / 4.0 - 1.0; 6]).collect();
        let acts = ActionSequence::new(rows.clone(), 30.0).unwrap();
        let l = label_pool(&acts, &ranges(), 1).unwrap();
        for (t, r) in rows.iter().enumerate() {
            assert_eq!(l.get(0, t), quantize(r[0], &ranges()[0]).unwrap());
        }
        let c = ActionSequence::new(vec![[0.5; 6]; 7], 30.0).unwrap();
        for st in 1..5 {
            let l = label_pool(&c, &ranges(), st).unwrap();
            assert_eq!(l.len(), 7usize.div_ceil(st));
            assert!(l.axis(3).iter().all(|b| *b == 5));
        }
    }
}
