//! Deterministic seed derivation.
//!
//! Every random computation in the crate draws from one explicit 64-bit
//! master seed. Independent parallel jobs (bootstrap replicates, null-model
//! replicates, per-country training, per-target forecasts) each derive a
//! substream seed from `(master, tag)` so that serial and parallel runs
//! produce identical results regardless of scheduling order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the substream seed for job `tag` under `master`.
pub fn substream(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

/// Combine several tag components into one (for e.g. (entity, year, dt) jobs).
pub fn combine(tags: &[u64]) -> u64 {
    let mut acc = 0xa076_1d64_78bd_642f_u64;
    for &t in tags {
        acc = splitmix64(acc ^ t);
    }
    acc
}

/// Seeded RNG for the substream `(master, tag)`.
pub fn rng(master: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(master, tag))
}
