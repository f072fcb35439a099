//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is the tuple
//! `(master seed, chain, step, domain)`, so a chain's draws at a given step
//! never depend on how chains are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Separates streams that share `(seed, chain, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Initial draw `X_N ~ N(0, I)`.
    Init = 1,
    /// Per-step noise `z_k`.
    StepNoise = 2,
    /// Training batches and probe draws.
    Training = 3,
    /// Fresh reference samples and evaluation probes.
    Reference = 4,
    /// Network weight initialization.
    ModelInit = 5,
}

pub fn stream(seed: u64, chain: u64, step: u64, domain: Domain) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, word) in [seed, chain, step, domain as u64].iter().enumerate() {
        key[8 * i..8 * (i + 1)].copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// A `d`-vector of standard normals from the stream keyed by the arguments.
pub fn normal_vector(seed: u64, chain: u64, step: u64, domain: Domain, d: usize) -> Vec<f64> {
    let mut rng = stream(seed, chain, step, domain);
    let mut out = vec![0.0; d];
    fill_standard_normal(&mut rng, &mut out);
    out
}
