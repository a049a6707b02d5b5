//! aerokit: measurement and supervision machinery for IMU-conditioned aerial
//! video generation.
//!
//! The crate is organized bottom-up:
//!
//! * [`dataio`]: clip directories, IMU streams, frame-rate alignment.
//! * [`quantizer`]: per-axis inertial binning and causal action alignment.
//! * [`synthworld`]: synthetic flights over a textured ground plane with
//!   analytic inertial ground truth.
//! * [`pseudovae`]: deterministic patch-projection encoder producing latents.
//! * [`autodiff`]: a small reverse-mode tape over dense `f32` tensors.
//! * [`probe`]: the latent-space physics probe and its training loop.
//! * [`metrics`]: AAS, PCR, Pearson, Lucas-Kanade flow and the Flow-IMU
//!   ridge evaluator.
//! * [`trainer`]: a toy action-conditioned latent generator trained with a
//!   frozen-probe consistency term.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iteration otherwise.

pub mod autodiff;
pub mod dataio;
pub mod metrics;
pub mod par;
pub mod probe;
pub mod pseudovae;
pub mod quantizer;
pub mod synthworld;
pub mod trainer;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Number of inertial axes: α_x, α_y, α_z, ω_x, ω_y, ω_z.
pub const NUM_AXES: usize = 6;

/// Axis names in storage order, shared by CSV headers and config files.
pub const AXIS_NAMES: [&str; NUM_AXES] = ["ax", "ay", "az", "wx", "wy", "wz"];

/// Version string embedded in every artifact this toolkit writes.
pub const TOOL_VERSION: &str = concat!("aerokit ", env!("CARGO_PKG_VERSION"));

/// Short, stable hex digest of a serializable configuration.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Seeded permutation of `0..n`, used by shuffled-control experiments.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    order
}
