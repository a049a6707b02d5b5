//! Smooth 6-DoF camera trajectories with analytic body-frame IMU signals.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spline::CubicBSpline;
use super::SynthError;
use crate::dataio::{ActionSequence, ImuStream};
use crate::NUM_AXES;

/// Per-axis bounds on body-frame acceleration (m/s²) and angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLimits {
    pub accel: [f64; 3],
    pub gyro: [f64; 3],
}

impl MotionLimits {
    pub const HOVER: Self = Self {
        accel: [0.0; 3],
        gyro: [0.0; 3],
    };

    fn as_row(&self) -> [f64; NUM_AXES] {
        [
            self.accel[0],
            self.accel[1],
            self.accel[2],
            self.gyro[0],
            self.gyro[1],
            self.gyro[2],
        ]
    }
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self {
            accel: [3.0, 3.0, 1.5],
            gyro: [2.0, 2.0, 2.0],
        }
    }
}

/// Camera pose: body (= camera) frame to world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

/// Position and orientation splines of a flight.
///
/// The camera frame is the body frame: x right, y down in the image, z along
/// the optical axis. World z points up and the ground is the plane z = 0.
/// Orientation is `mount ⊗ normalize(q(t))` where `q(t)` is a cubic B-spline
/// over quaternion components.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    position: CubicBSpline<3>,
    orientation: CubicBSpline<4>,
    mount: UnitQuaternion<f64>,
    duration: f64,
}

/// Rotation taking the camera frame to a world frame where the optical axis
/// points down and forward (+y), `tilt` radians away from nadir.
pub fn mount_rotation(tilt: f64) -> UnitQuaternion<f64> {
    let (s, c) = tilt.sin_cos();
    let x = Vector3::new(1.0, 0.0, 0.0);
    let z = Vector3::new(0.0, s, -c);
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m))
}

impl Trajectory {
    /// Build from control points. Orientation control points are quaternion
    /// components `[w, x, y, z]` of the rotation relative to `mount`.
    pub fn from_control_points(
        spacing: f64,
        positions: Vec<[f64; 3]>,
        orientations: Vec<[f64; 4]>,
        mount: UnitQuaternion<f64>,
        duration: f64,
    ) -> Result<Self, SynthError> {
        if positions.len() < 4 || orientations.len() < 4 {
            return Err(SynthError::Config("need at least 4 control points".into()));
        }
        let mut orientations = orientations;
        for k in 1..orientations.len() {
            let prev = orientations[k - 1];
            let dot: f64 = (0..4).map(|d| prev[d] * orientations[k][d]).sum();
            if dot < 0.0 {
                orientations[k] = orientations[k].map(|v| -v);
            }
        }
        let position = CubicBSpline::new(spacing, positions);
        let orientation = CubicBSpline::new(spacing, orientations);
        let span = position.span().min(orientation.span());
        if !(duration > 0.0 && duration <= span + 1e-12) {
            return Err(SynthError::Config(format!(
                "duration {duration} outside spline span {span}"
            )));
        }
        Ok(Self {
            position,
            orientation,
            mount,
            duration,
        })
    }

    /// Constant pose.
    pub fn hover(position: [f64; 3], mount: UnitQuaternion<f64>, duration: f64) -> Self {
        let spacing = duration.max(1e-3);
        Self::from_control_points(
            spacing,
            vec![position; 4],
            vec![[1.0, 0.0, 0.0, 0.0]; 4],
            mount,
            spacing,
        )
        .expect("hover trajectory is valid")
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn mount(&self) -> UnitQuaternion<f64> {
        self.mount
    }

    fn local_orientation(&self, t: f64) -> (Quaternion<f64>, Quaternion<f64>) {
        let s = self.orientation.eval(t);
        let p = Quaternion::new(s.value[0], s.value[1], s.value[2], s.value[3]);
        let dp = Quaternion::new(s.d1[0], s.d1[1], s.d1[2], s.d1[3]);
        let n = p.norm();
        let q = p / n;
        // d/dt (p / |p|) = (dp - q <q, dp>) / |p|
        let dq = (dp - q * q.dot(&dp)) / n;
        (q, dq)
    }

    pub fn pose(&self, t: f64) -> Pose {
        let s = self.position.eval(t);
        let (q, _) = self.local_orientation(t);
        Pose {
            position: Vector3::from(s.value),
            rotation: self.mount * UnitQuaternion::new_unchecked(q),
        }
    }

    /// Body-frame translational acceleration `Rᵀ p̈` (gravity not included).
    pub fn accel_body(&self, t: f64) -> [f64; 3] {
        let s = self.position.eval(t);
        let r = self.pose(t).rotation;
        let a = r.inverse_transform_vector(&Vector3::from(s.d2));
        [a.x, a.y, a.z]
    }

    /// Body-frame angular velocity, the vector part of `2 q̄ q̇`.
    pub fn gyro_body(&self, t: f64) -> [f64; 3] {
        let (q, dq) = self.local_orientation(t);
        let w = q.conjugate() * dq * 2.0;
        [w.i, w.j, w.k]
    }

    /// All six IMU channels at time `t`.
    pub fn imu_at(&self, t: f64) -> [f64; NUM_AXES] {
        let a = self.accel_body(t);
        let w = self.gyro_body(t);
        [a[0], a[1], a[2], w[0], w[1], w[2]]
    }

    /// Largest `|channel|` per axis over a uniform grid with step `dt`.
    pub fn peak_imu(&self, dt: f64) -> [f64; NUM_AXES] {
        let n = (self.duration / dt).ceil() as usize;
        let mut peak = [0.0f64; NUM_AXES];
        for k in 0..=n {
            let v = self.imu_at((k as f64 * dt).min(self.duration));
            for (p, x) in peak.iter_mut().zip(v) {
                *p = p.max(x.abs());
            }
        }
        peak
    }

    pub fn min_altitude(&self, dt: f64) -> f64 {
        let n = (self.duration / dt).ceil() as usize;
        (0..=n)
            .map(|k| self.position.eval((k as f64 * dt).min(self.duration)).value[2])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sampler knobs for random flights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySampler {
    /// Seconds between spline knots.
    pub knot_spacing: f64,
    /// Initial altitude is drawn uniformly from this interval (m).
    pub altitude: [f64; 2],
    /// Lowest altitude a sample may reach (m).
    pub min_altitude: f64,
    /// Camera tilt away from nadir (rad).
    pub mount_tilt: f64,
    /// Bound on the accumulated roll/pitch rotation (rad).
    pub max_tilt: f64,
    /// Bound on the accumulated rotation about the optical axis (rad).
    pub max_twist: f64,
    /// Knot values are drawn from ±fill·limit.
    pub fill: f64,
    /// Start with zero velocity and zero angular velocity.
    pub start_at_rest: bool,
    pub max_attempts: usize,
    /// Step of the grid used to verify limits (s).
    pub check_step: f64,
}

impl Default for TrajectorySampler {
    fn default() -> Self {
        Self {
            knot_spacing: 0.4,
            altitude: [1.7, 2.3],
            min_altitude: 0.8,
            mount_tilt: 0.35,
            max_tilt: 0.5,
            max_twist: 1.2,
            fill: 0.8,
            start_at_rest: true,
            max_attempts: 400,
            check_step: 2e-3,
        }
    }
}

/// Accept a candidate only if its sampled peaks stay below this fraction of
/// the limit, so the limit also holds between grid points.
const LIMIT_MARGIN: f64 = 0.97;

impl TrajectorySampler {
    pub fn sample(
        &self,
        seed: u64,
        duration: f64,
        limits: &MotionLimits,
    ) -> Result<Trajectory, SynthError> {
        if !(duration > 0.0) {
            return Err(SynthError::Config(format!("duration must be positive, got {duration}")));
        }
        if limits.as_row().iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(SynthError::Config("limits must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = limits.as_row();
        for _ in 0..self.max_attempts {
            let traj = self.candidate(&mut rng, duration, limits)?;
            let peak = traj.peak_imu(self.check_step);
            let within = peak
                .iter()
                .zip(caps)
                .all(|(p, c)| *p <= LIMIT_MARGIN * c || *p == 0.0);
            if within && traj.min_altitude(self.check_step) >= self.min_altitude {
                return Ok(traj);
            }
        }
        Err(SynthError::LimitsUnsatisfied {
            attempts: self.max_attempts,
        })
    }

    fn candidate(
        &self,
        rng: &mut ChaCha8Rng,
        duration: f64,
        limits: &MotionLimits,
    ) -> Result<Trajectory, SynthError> {
        let h = self.knot_spacing;
        let segments = (duration / h).ceil().max(1.0) as usize;
        let n_ctrl = segments + 3;
        let mount = mount_rotation(self.mount_tilt);
        let alt = rng.gen_range(self.altitude[0]..=self.altitude[1]);
        let start = [0.0, 0.0, alt];

        // Position: prescribe the second difference (acceleration at knot i)
        // and integrate the control points.
        let mut pos = Vec::with_capacity(n_ctrl);
        if self.start_at_rest {
            pos.extend([start; 3]);
        } else {
            let v0: [f64; 3] = std::array::from_fn(|d| {
                let l = limits.accel[d];
                rng.gen_range(-1.0..=1.0) * l * 0.3
            });
            pos.push(std::array::from_fn(|d| start[d] - v0[d] * h));
            pos.push(start);
            pos.push(std::array::from_fn(|d| start[d] + v0[d] * h));
        }
        while pos.len() < n_ctrl {
            let body: Vector3<f64> = Vector3::from_fn(|d, _| {
                let l = limits.accel[d] * self.fill;
                if l > 0.0 {
                    rng.gen_range(-l..=l)
                } else {
                    0.0
                }
            });
            let a = mount * body;
            let k = pos.len();
            let (p1, p0) = (pos[k - 1], pos[k - 2]);
            pos.push(std::array::from_fn(|d| h * h * a[d] + 2.0 * p1[d] - p0[d]));
        }

        // Orientation: bounded random walk of a rotation vector, converted
        // to control quaternions.
        let bounds = [self.max_tilt, self.max_tilt, self.max_twist];
        let mut theta = [0.0f64; 3];
        let mut rot = Vec::with_capacity(n_ctrl);
        if self.start_at_rest {
            rot.extend([[1.0, 0.0, 0.0, 0.0]; 3]);
        }
        while rot.len() < n_ctrl {
            for d in 0..3 {
                let l = limits.gyro[d] * self.fill * h;
                if l > 0.0 {
                    theta[d] = (theta[d] + rng.gen_range(-l..=l)).clamp(-bounds[d], bounds[d]);
                }
            }
            let q = UnitQuaternion::from_scaled_axis(Vector3::from(theta));
            rot.push([q.w, q.i, q.j, q.k]);
        }
        Trajectory::from_control_points(h, pos, rot, mount, duration)
    }
}

/// Sample a random flight with the default sampler.
pub fn sample_trajectory(
    seed: u64,
    duration: f64,
    limits: &MotionLimits,
) -> Result<Trajectory, SynthError> {
    TrajectorySampler::default().sample(seed, duration, limits)
}

/// Instantaneous IMU at frame times `t0 + k / fps`.
pub fn imu_from_trajectory(
    traj: &Trajectory,
    fps: f64,
    frames: usize,
    t0: f64,
) -> Result<ActionSequence, SynthError> {
    let last = t0 + (frames as f64 - 1.0) / fps;
    if t0 < 0.0 || last > traj.duration() + 1e-9 {
        return Err(SynthError::TooShort {
            needed: last,
            available: traj.duration(),
        });
    }
    let rows = (0..frames)
        .map(|k| traj.imu_at(t0 + k as f64 / fps))
        .collect();
    Ok(ActionSequence::new(rows, fps)?)
}

/// Raw IMU samples at `rate_hz` over `[start, end]`.
pub fn imu_stream_from_trajectory(
    traj: &Trajectory,
    rate_hz: f64,
    start: f64,
    end: f64,
) -> Result<ImuStream, SynthError> {
    if start < 0.0 || end > traj.duration() + 1e-9 {
        return Err(SynthError::TooShort {
            needed: end,
            available: traj.duration(),
        });
    }
    Ok(ImuStream::sample_uniform(start, end, rate_hz, |t| {
        traj.imu_at(t.min(traj.duration()))
    })?)
}
