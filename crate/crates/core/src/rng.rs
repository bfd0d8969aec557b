//! Seed derivation and random streams.
//!
//! All randomness flows from a single `u64` master seed. Child seeds are
//! derived with [`derive_seed`], which folds a path of integers (grid index,
//! replica index, site, ...) through the SplitMix64 finalizer:
//!
//! ```text
//! h0 = mix64(master)
//! h_{k+1} = mix64(h_k ^ mix64(path[k]))
//! ```
//!
//! The result depends only on the path, never on execution order, so replica
//! farms are reproducible for any thread count.

use rand::SeedableRng;
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

/// General-purpose generator used for replicas and single-model runs.
pub type SimRng = Xoshiro256PlusPlus;

/// Small-state generator for per-site mark streams (8 bytes per site).
pub type SiteRng = SplitMix64;

/// SplitMix64 output function.
#[inline]
pub fn mix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(master), |acc, &k| mix64(acc ^ mix64(k)))
}

pub fn sim_rng(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}

pub fn site_rng(master: u64, site: usize) -> SiteRng {
    SiteRng::seed_from_u64(derive_seed(master, &[0x517E, site as u64]))
}

/// Exponential variate with the given rate; `f64::INFINITY` when the rate is 0.
#[inline]
pub fn exp_sample<R: rand::Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    // 1 - U lies in (0, 1], so the log is finite.
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}
