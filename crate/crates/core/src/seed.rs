//! Named sub-seeds derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a byte string (FNV-1a, then a splitmix finalizer).
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Derive the seed for a named stage or item. Platform- and version-stable.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in root.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn named_rng(root: u64, name: &str) -> Rng {
    rng_from(derive_seed(root, name))
}

/// `n` distinct indices below `len`, in sampling order.
pub fn sample_indices(rng: &mut Rng, len: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, n).into_vec()
}
