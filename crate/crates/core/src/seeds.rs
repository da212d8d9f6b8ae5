//! Named, reproducible random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the substream `label` (e.g. `"corpus"`, `"init"`, `"train"`).
pub fn derive(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Seed for item `index` within substream `label`.
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(seed, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

pub fn rng_indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, label, index))
}
