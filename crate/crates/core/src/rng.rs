//! Counter-based random streams.
//!
//! Every consumer of randomness asks for a stream identified by a master seed
//! plus a path of labels (replication index, purpose, chunk). The stream is a
//! ChaCha8 keystream keyed by the mixed seed with the final label as its
//! stream id, so results never depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose labels used to separate streams that share a replication index.
pub mod label {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TEST: u64 = 3;
    pub const SIMPLEX: u64 = 4;
    pub const TREES: u64 = 5;
    pub const PAIRS: u64 = 6;
    pub const ORACLE: u64 = 7;
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically derive a child seed from `seed` and a path of labels.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed ^ 0x9E37_79B9_7F4A_7C15), |acc, &l| {
        mix64(acc ^ mix64(l.wrapping_add(0xD134_2543_DE82_EF95)))
    })
}

/// A stream for `(seed, path)`; the last label selects the ChaCha stream id.
pub fn stream(seed: u64, path: &[u64]) -> Stream {
    let (head, last) = match path.split_last() {
        Some((last, head)) => (head, *last),
        None => (&[][..], 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, head));
    rng.set_stream(last);
    rng
}
