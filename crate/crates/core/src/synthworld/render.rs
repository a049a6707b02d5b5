//! Pinhole rendering of a value-noise textured ground plane.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::trajectory::{Pose, Trajectory};
use super::SynthError;
use crate::dataio::VideoClip;

/// Procedural ground texture and camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub texture_seed: u64,
    /// Number of value-noise octaves (at least 4).
    pub octaves: usize,
    /// Lattice cell size of the coarsest octave, in metres.
    pub base_cell: f64,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f64,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl SceneConfig {
    /// Centered principal point and a ~60° horizontal field of view.
    pub fn with_size(width: usize, height: usize, texture_seed: u64) -> Self {
        Self {
            texture_seed,
            octaves: 4,
            base_cell: 1.6,
            persistence: 0.65,
            focal_px: 0.875 * width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.focal_px > 0.0) {
            return Err(SynthError::Config("focal length must be positive".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(SynthError::Config("image must be at least 16x16".into()));
        }
        if self.octaves < 4 {
            return Err(SynthError::Config("texture needs at least 4 octaves".into()));
        }
        if !(self.base_cell > 0.0) || !(self.persistence > 0.0) {
            return Err(SynthError::Config("texture scale must be positive".into()));
        }
        Ok(())
    }

    /// Unnormalized camera-frame ray through pixel centre `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.focal_px, (v - self.cy) / self.focal_px, 1.0)
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 1e-9).then(|| {
            (
                self.cx + self.focal_px * p.x / p.z,
                self.cy + self.focal_px * p.y / p.z,
            )
        })
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::with_size(64, 64, 0)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, salt: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(
        seed ^ splitmix(salt ^ splitmix((ix as u64).wrapping_mul(0x9E37_79B1) ^ (iy as u64).rotate_left(32))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, salt: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (x - fx, y - fy);
    let v00 = lattice(seed, salt, ix, iy);
    let v10 = lattice(seed, salt, ix + 1, iy);
    let v01 = lattice(seed, salt, ix, iy + 1);
    let v11 = lattice(seed, salt, ix + 1, iy + 1);
    let a = v00 + tx * (v10 - v00);
    let b = v01 + tx * (v11 - v01);
    a + ty * (b - a)
}

impl SceneConfig {
    /// Fractal value noise for one colour channel at world `(x, y)`.
    ///
    /// Octaves whose cells are not at least ~8 pixel footprints wide are faded
    /// to their mean so distant texture does not alias.
    fn texture(&self, channel: u64, x: f64, y: f64, footprint: f64) -> f64 {
        let mut cell = self.base_cell;
        let mut amp = 1.0;
        let (mut sum, mut norm) = (0.0, 0.0);
        for o in 0..self.octaves as u64 {
            let lod = ((cell / footprint - 4.0) / 4.0).clamp(0.0, 1.0);
            let n = if lod > 0.0 {
                value_noise(self.texture_seed, o * 8 + channel, x / cell, y / cell)
            } else {
                0.5
            };
            sum += amp * (lod * n + (1.0 - lod) * 0.5);
            norm += amp;
            amp *= self.persistence;
            cell *= 0.5;
        }
        sum / norm
    }

    fn shade(&self, x: f64, y: f64, footprint: f64) -> [u8; 3] {
        let base = self.texture(0, x, y, footprint);
        let mut rgb = [0u8; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let tint = self.texture(1 + c as u64, x * 0.7, y * 0.7, footprint);
            let v = 0.7 * base + 0.3 * tint;
            // stretch contrast around the mean
            let v = (0.5 + 2.2 * (v - 0.5)).clamp(0.0, 1.0);
            *out = (v * 255.0).round() as u8;
        }
        rgb
    }
}

const SKY: [u8; 3] = [200, 220, 255];

/// Render one frame for a camera pose.
pub fn render_frame(pose: &Pose, scene: &SceneConfig) -> Result<Vec<u8>, SynthError> {
    let cam = pose.position;
    if !(cam.z > 0.0) {
        return Err(SynthError::BelowGround { altitude: cam.z });
    }
    let mut out = vec![0u8; scene.width * scene.height * 3];
    for v in 0..scene.height {
        for u in 0..scene.width {
            let d = pose.rotation * scene.ray(u as f64, v as f64);
            let px = &mut out[(v * scene.width + u) * 3..][..3];
            if d.z >= -1e-9 {
                px.copy_from_slice(&SKY);
                continue;
            }
            let s = -cam.z / d.z;
            let hit = cam + d * s;
            let footprint = s * d.norm() / scene.focal_px;
            px.copy_from_slice(&scene.shade(hit.x, hit.y, footprint));
        }
    }
    Ok(out)
}

/// Render `frames` frames at times `t0 + k / fps`.
pub fn render(
    traj: &Trajectory,
    scene: &SceneConfig,
    fps: f64,
    frames: usize,
    t0: f64,
) -> Result<VideoClip, SynthError> {
    scene.validate()?;
    let last = t0 + (frames as f64 - 1.0) / fps;
    if t0 < 0.0 || last > traj.duration() + 1e-9 {
        return Err(SynthError::TooShort {
            needed: last,
            available: traj.duration(),
        });
    }
    let rendered = crate::par::map_range(frames, |k| render_frame(&traj.pose(t0 + k as f64 / fps), scene));
    let mut pixels = Vec::with_capacity(frames * scene.width * scene.height * 3);
    for f in rendered {
        pixels.extend(f?);
    }
    Ok(VideoClip::new(scene.width, scene.height, fps, t0, pixels)?)
}

/// Image motion of pixel `(u, v)` between times `ta` and `tb`, from the
/// ground-plane geometry. `None` when the pixel sees sky.
pub fn analytic_flow(
    traj: &Trajectory,
    scene: &SceneConfig,
    ta: f64,
    tb: f64,
    u: f64,
    v: f64,
) -> Option<(f64, f64)> {
    let (pa, pb) = (traj.pose(ta), traj.pose(tb));
    let d = pa.rotation * scene.ray(u, v);
    if d.z >= -1e-9 {
        return None;
    }
    let hit = pa.position + d * (-pa.position.z / d.z);
    let cam_b = pb.rotation.inverse_transform_vector(&(hit - pb.position));
    scene.project(&cam_b).map(|(ub, vb)| (ub - u, vb - v))
}
