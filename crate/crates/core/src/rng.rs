//! Seedable, reproducible random streams.
//!
//! Every randomized step derives its own ChaCha stream from the run seed, a
//! namespace, and an index, so results do not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const NS_SUBSAMPLE: u64 = 1;
pub(crate) const NS_PHI_INIT: u64 = 2;
pub(crate) const NS_THETA: u64 = 3;
pub(crate) const NS_INFER: u64 = 4;
pub(crate) const NS_SYNTH: u64 = 5;

pub(crate) fn stream_rng(seed: u64, namespace: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(namespace.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index));
    rng
}

/// FNV-1a over 8-byte words; used to derive content-keyed stream indices.
pub(crate) fn mix_words(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}
