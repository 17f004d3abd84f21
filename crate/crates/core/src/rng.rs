//! Seeded counter-based random streams.
//!
//! A stream is keyed by a root seed plus a path of integers
//! (e.g. `[epoch, sample_index]`), so any item can be regenerated without
//! touching the others and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep streams for different purposes apart.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const PHANTOM_SUBJECT: u64 = 4;
    pub const PHANTOM_LABELS: u64 = 5;
    pub const BOOTSTRAP: u64 = 6;
    pub const SPLIT: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed and a path into a 64-bit value.
pub fn mix(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent ChaCha8 stream for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = mix(seed, path);
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
