//! Purpose-tagged seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream seeded
//! by `(base_seed, purpose tag)`. Separate tags give independent streams, so
//! toggling one component (say, skipping meta-training in an ablation) never
//! shifts the randomness consumed by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a purpose tag into a new 64-bit seed
/// (FNV-1a over the tag, finalized with the splitmix64 mixer).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(base ^ h)
}

/// ChaCha8 stream for the given purpose.
pub fn seeded_rng(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
