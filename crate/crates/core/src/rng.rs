//! Deterministic randomness: one master seed per run, fanned out into
//! named substreams so that adding draws to one consumer never perturbs
//! another. Streams are ChaCha8 and fully portable across platforms.

use rand::SeedableRng;
use rand_distr::Distribution;

use crate::{sc, Scalar};

/// The stream type used everywhere randomness is consumed.
pub type SeedRng = rand_chacha::ChaCha8Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for the substream `name` under `master`.
pub fn substream_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

/// Independent stream for one named consumer ("init", "data", "gate-noise", ...).
pub fn substream(master: u64, name: &str) -> SeedRng {
    SeedRng::seed_from_u64(substream_seed(master, name))
}

/// `n` draws from N(mean, std²). Sampling happens in f64 so that f32 and
/// f64 instantiations consume the stream identically.
pub fn normal_vec<S: Scalar>(rng: &mut SeedRng, n: usize, mean: f64, std: f64) -> Vec<S> {
    let dist = rand_distr::Normal::new(mean, std).expect("std must be finite and non-negative");
    (0..n).map(|_| sc(dist.sample(rng))).collect()
}

/// `n` uniform draws from [lo, hi).
pub fn uniform_vec<S: Scalar>(rng: &mut SeedRng, n: usize, lo: f64, hi: f64) -> Vec<S> {
    use rand::Rng as _;
    (0..n).map(|_| sc(lo + (hi - lo) * rng.random::<f64>())).collect()
}

/// `n` standard Gumbel(0, 1) draws via -ln(-ln(u)).
pub fn gumbel_vec<S: Scalar>(rng: &mut SeedRng, n: usize) -> Vec<S> {
    use rand::Rng as _;
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
            sc(-(-u.ln()).ln())
        })
        .collect()
}
