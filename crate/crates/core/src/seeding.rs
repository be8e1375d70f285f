//! Deterministic seed derivation.
//!
//! Every stochastic stage derives its RNG from a master seed, a stage tag,
//! and an index, via a splitmix64 absorption scheme. The derivation is pure
//! integer arithmetic, so streams are identical across platforms and across
//! parallel execution orders.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step (Steele, Lea & Flood constants).
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, tag, index)`.
///
/// Distinct tags and indices yield statistically independent streams; the
/// same triple always yields the same seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut state = splitmix64(master ^ 0x6B65_7961_6C69_676E); // "keyalign" high bytes
    for b in tag.as_bytes() {
        state = splitmix64(state ^ u64::from(*b).wrapping_add(0xFF));
    }
    state = splitmix64(state ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    splitmix64(state)
}

/// RNG seeded from a derived seed. ChaCha8 is portable and reproducible.
pub fn rng_for(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}

/// RNG directly from a raw seed value.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
