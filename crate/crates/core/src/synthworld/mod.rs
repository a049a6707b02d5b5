//! Synthetic flights over a textured ground plane with exact inertial
//! ground truth.

mod render;
mod spline;
mod trajectory;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use render::{analytic_flow, render, render_frame, SceneConfig};
pub use spline::{CubicBSpline, SplineSample};
pub use trajectory::{
    imu_from_trajectory, imu_stream_from_trajectory, mount_rotation, sample_trajectory,
    MotionLimits, Pose, Trajectory, TrajectorySampler,
};

use crate::dataio::{self, ClipMeta, DataError, ImuStream, VideoClip};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not satisfy motion limits within {attempts} attempts")]
    LimitsUnsatisfied { attempts: usize },
    #[error("trajectory too short: need {needed:.4} s, have {available:.4} s")]
    TooShort { needed: f64, available: f64 },
    #[error("camera at or below the ground plane (altitude {altitude})")]
    BelowGround { altitude: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub clips: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// Raw IMU rate written to `imu.csv`.
    pub imu_rate_hz: f64,
    pub limits: MotionLimits,
    pub sampler: TrajectorySampler,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clips: 8,
            frames: 33,
            width: 64,
            height: 64,
            fps: 30.0,
            imu_rate_hz: 500.0,
            limits: MotionLimits::default(),
            sampler: TrajectorySampler::default(),
        }
    }
}

/// One generated clip with its trajectory and raw IMU.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub id: String,
    pub trajectory: Trajectory,
    pub scene: SceneConfig,
    pub clip: VideoClip,
    pub imu: ImuStream,
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl SynthConfig {
    /// First frame time; leaves half a frame of IMU before it.
    pub fn clip_t0(&self) -> f64 {
        1.0 / self.fps
    }

    /// Trajectory length covering every frame window plus one frame.
    pub fn duration(&self) -> f64 {
        (self.frames as f64 + 1.5) / self.fps
    }

    /// Generate clip `index`. Depends only on `(seed, index)`.
    pub fn generate(&self, index: usize) -> Result<SynthClip, SynthError> {
        let s = clip_seed(self.seed, index);
        let trajectory = self.sampler.sample(s, self.duration(), &self.limits)?;
        let scene = SceneConfig::with_size(self.width, self.height, s ^ 0x5EED);
        let t0 = self.clip_t0();
        let clip = render(&trajectory, &scene, self.fps, self.frames, t0)?;
        let lo = t0 - 0.5 / self.fps;
        let hi = t0 + (self.frames as f64 - 0.5) / self.fps;
        let imu = imu_stream_from_trajectory(&trajectory, self.imu_rate_hz, lo, hi)?;
        Ok(SynthClip {
            id: format!("clip_{index:05}"),
            trajectory,
            scene,
            clip,
            imu,
        })
    }

    pub fn generate_all(&self) -> Result<Vec<SynthClip>, SynthError> {
        crate::par::map_range(self.clips, |i| self.generate(i))
            .into_iter()
            .collect()
    }

    /// Write every clip as a clip directory under `out`.
    pub fn write_dataset(&self, out: &Path) -> Result<Vec<SynthClip>, SynthError> {
        let clips = self.generate_all()?;
        for c in &clips {
            let mut meta = ClipMeta::for_clip(&c.clip);
            meta.gravity_compensated = Some(true);
            meta.extra.insert("seed".into(), self.seed.to_string());
            meta.extra.insert("source".into(), "synthworld".into());
            meta.extra.insert("config".into(), crate::fingerprint(self));
            dataio::write_clip(&out.join(&c.id), &c.clip, &meta, Some(&c.imu))?;
        }
        Ok(clips)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hover_frames_are_identical() {
        let traj = Trajectory::hover([0.3, -0.2, 2.0], mount_rotation(0.35), 1.0);
        let clip = render(&traj, &SceneConfig::default(), 30.0, 10, 0.0).unwrap();
        for k in 1..10 {
            assert_eq!(clip.frame(k), clip.frame(0));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SynthConfig {
            clips: 2,
            frames: 6,
            ..Default::default()
        };
        let a = cfg.generate(1).unwrap();
        let b = cfg.generate(1).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.imu, b.imu);
        assert_ne!(cfg.generate(0).unwrap().clip, a.clip);
    }

    #[test]
    fn camera_below_ground_is_an_error() {
        let traj = Trajectory::hover([0.0, 0.0, -0.5], mount_rotation(0.0), 1.0);
        assert!(matches!(
            render(&traj, &SceneConfig::default(), 30.0, 3, 0.0),
            Err(SynthError::BelowGround { .. })
        ));
    }

    #[test]
    fn texture_has_contrast() {
        let traj = Trajectory::hover([0.0, 0.0, 2.0], mount_rotation(0.35), 1.0);
        let clip = render(&traj, &SceneConfig::default(), 30.0, 2, 0.0).unwrap();
        let g = clip.gray_frame(0);
        let mean = g.iter().sum::<f32>() / g.len() as f32;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / g.len() as f32;
        assert!(var.sqrt() > 0.08, "std {}", var.sqrt());
    }

    #[test]
    fn dataset_files_reload_with_matching_actions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            clips: 2,
            frames: 8,
            width: 32,
            height: 32,
            seed: 4,
            ..Default::default()
        };
        let clips = cfg.write_dataset(dir.path()).unwrap();
        let recs = dataio::load_dataset(dir.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].clip, clips[0].clip);
        assert_eq!(recs[1].meta.gravity_compensated, Some(true));
        let acts = recs[0].actions().unwrap();
        let inst = imu_from_trajectory(&clips[0].trajectory, cfg.fps, cfg.frames, cfg.clip_t0()).unwrap();
        // Window means track the instantaneous values closely for smooth motion.
        for (a, b) in acts.rows().iter().zip(inst.rows()) {
            for j in 0..6 {
                assert!((a[j] - b[j]).abs() < 0.05, "{a:?} vs {b:?}");
            }
        }
    }
}
