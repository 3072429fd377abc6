//! Seeded randomness. Every stochastic component draws from a `RunRng`
//! seeded explicitly, so a (seed, config, data) triple fully determines a
//! run on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for sub-run `index` of a master seed.
/// Index 0 maps to the master seed itself so a singleton sub-run is
/// indistinguishable from a direct run.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    if index == 0 {
        return master;
    }
    // splitmix64 over (master, index)
    let mut z = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
