use aerokit::metrics::{dense_flow, FlowConfig};
use aerokit::synthworld::{analytic_flow, mount_rotation, render, SceneConfig, Trajectory};
use nalgebra::{Unit, UnitQuaternion, Vector3};

const FPS: f64 = 30.0;
const FRAMES: usize = 12;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Dense flow vs analytic flow at every confident grid point seeing ground.
fn compare(traj: &Trajectory, scene: &SceneConfig) -> Vec<((f64, f64), (f64, f64))> {
    let clip = render(traj, scene, FPS, FRAMES, 0.0).unwrap();
    let cfg = FlowConfig::default();
    let mut pairs = Vec::new();
    for k in 0..FRAMES - 1 {
        let f = dense_flow(&clip.gray_frame(k), &clip.gray_frame(k + 1), scene.width, scene.height, &cfg).unwrap();
        for gy in 0..f.grid {
            for gx in 0..f.grid {
                let i = gy * f.grid + gx;
                let (u, v) = f.point(gx, gy);
                let (ta, tb) = (k as f64 / FPS, (k + 1) as f64 / FPS);
                if let (true, Some(a)) = (f.confident[i], analytic_flow(traj, scene, ta, tb, u, v)) {
                    pairs.push(((f.u[i], f.v[i]), a));
                }
            }
        }
    }
    pairs
}

#[test]
fn translating_camera_matches_planar_flow() {
    let spacing = 0.25;
    let positions: Vec<[f64; 3]> = (0..8).map(|i| [0.6 * spacing * (i as f64 - 1.0), 0.0, 2.0]).collect();
    let traj = Trajectory::from_control_points(spacing, positions, vec![[1.0, 0.0, 0.0, 0.0]; 8], mount_rotation(0.35), 1.0).unwrap();
    let scene = SceneConfig::with_size(64, 64, 5);
    let pairs = compare(&traj, &scene);
    assert!(pairs.len() > 300, "only {} usable points", pairs.len());
    let errs: Vec<f64> = pairs.iter().map(|((u, v), (au, av))| ((u - au).powi(2) + (v - av).powi(2)).sqrt()).collect();
    let mean_mag = pairs.iter().map(|(_, (au, av))| au.hypot(*av)).sum::<f64>() / pairs.len() as f64;
    assert!(mean_mag > 0.3, "motion too small to be informative: {mean_mag}");
    let m = median(errs);
    assert!(m < 0.5, "median endpoint error {m} px");
}

#[test]
fn yaw_flow_direction_matches_analytic() {
    let mount = mount_rotation(0.35);
    // Rotation about world vertical, expressed relative to the mount.
    let axis = Unit::new_normalize(mount.inverse_transform_vector(&Vector3::z()));
    let spacing = 0.25;
    let rate = 0.6;
    let orientations: Vec<[f64; 4]> = (0..8)
        .map(|i| {
            let q = UnitQuaternion::from_axis_angle(&axis, rate * spacing * (i as f64 - 1.0));
            [q.w, q.i, q.j, q.k]
        })
        .collect();
    let traj = Trajectory::from_control_points(spacing, vec![[0.0, 0.0, 2.0]; 8], orientations, mount, 1.0).unwrap();
    let scene = SceneConfig::with_size(64, 64, 9);
    let pairs = compare(&traj, &scene);
    assert!(pairs.len() > 300, "only {} usable points", pairs.len());
    let angles: Vec<f64> = pairs
        .iter()
        .filter(|(_, (au, av))| au.hypot(*av) > 0.2)
        .map(|((u, v), (au, av))| {
            let d = v.atan2(*u) - av.atan2(*au);
            d.sin().atan2(d.cos()).abs().to_degrees()
        })
        .collect();
    assert!(angles.len() > 200);
    let m = median(angles);
    assert!(m < 15.0, "median angular error {m} degrees");
}
