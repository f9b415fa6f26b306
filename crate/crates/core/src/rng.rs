//! Seed derivation. Every random stream is a ChaCha generator keyed by a
//! root seed, a purpose label and a tuple of counters, so results do not
//! depend on evaluation order or batching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed, a purpose label and counters into a child seed.
pub fn derive_seed(root: u64, purpose: &str, counters: &[u64]) -> u64 {
    let mut h = splitmix(root);
    for b in purpose.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    // length separator so ("ab", [..]) and ("a", [b, ..]) differ
    h = splitmix(h ^ (0xFF00 | purpose.len() as u64));
    for &c in counters {
        h = splitmix(h ^ c);
    }
    h
}

pub fn stream(root: u64, purpose: &str, counters: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, purpose, counters))
}
