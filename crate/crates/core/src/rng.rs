//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream type used everywhere in the crate.
pub type CapoRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ mix(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn seeded(seed: u64) -> CapoRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A generator for stream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> CapoRng {
    seeded(derive_seed(seed, stream))
}
