//! Seed derivation and Gaussian sampling.
//!
//! Every random quantity in a run is drawn from its own ChaCha8 stream. The
//! stream for a `(master seed, round, client, purpose)` tuple is seeded with
//!
//! ```text
//! s0 = splitmix64(master ^ 0x243F6A8885A308D3)
//! s1 = splitmix64(s0 ^ round)
//! s2 = splitmix64(s1 ^ client)
//! id = splitmix64(s2 ^ purpose)
//! ```
//!
//! where `splitmix64` is the finalizer of Steele et al.'s SplitMix64
//! generator. The id of a `(round, client)` pair does not depend on the number
//! of clients or on the order in which streams are created, so clients can be
//! simulated in any order or in parallel with identical results.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Client index used for server-side streams (noise, pilots shared by all).
pub const SERVER: u64 = u64::MAX;

/// Round index used for streams that are not tied to a round.
pub const NO_ROUND: u64 = u64::MAX;

/// Purpose tags for stream derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    LocalSgd = 1,
    Fading = 2,
    Estimation = 3,
    Noise = 4,
    PilotSgd = 5,
    PilotChannel = 6,
    Synthetic = 7,
    Probe = 8,
    Moments = 9,
    PilotEstimation = 10,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream_id(master: u64, round: u64, client: u64, purpose: Purpose) -> u64 {
    let s0 = splitmix64(master ^ 0x243F_6A88_85A3_08D3);
    let s1 = splitmix64(s0 ^ round);
    let s2 = splitmix64(s1 ^ client);
    splitmix64(s2 ^ purpose as u64)
}

pub fn substream(master: u64, round: u64, client: u64, purpose: Purpose) -> SimRng {
    SimRng::seed_from_u64(substream_id(master, round, client, purpose))
}

/// Uniform in (0, 1]; never returns zero so `ln` is finite.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// One Box–Muller transform: a pair of independent standard normals.
pub fn box_muller<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = open_unit(rng);
    let u2 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Circularly symmetric complex Gaussian CN(0, variance).
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let (a, b) = box_muller(rng);
    let s = (variance / 2.0).sqrt();
    Complex64::new(s * a, s * b)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    box_muller(rng).0
}
