//! Named, counter-addressable random substreams.
//!
//! All randomness descends from a single `u64` seed. A substream is a
//! ChaCha8 generator keyed by the seed and placed on a stream id derived
//! from a name such as `"dataset"` or `"sweep:2000:17"`. Because ChaCha is
//! counter based, the draws for item `i` of a substream can be reached by
//! seeking, so parallel generation never depends on iteration order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to map stream names to stream ids.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for the named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// Generator positioned at item `index` of a substream where every item
/// consumes at most `words_per_item` 32-bit words.
pub fn substream_at(seed: u64, name: &str, index: u64, words_per_item: u64) -> ChaCha8Rng {
    let mut rng = substream(seed, name);
    rng.set_word_pos(u128::from(index) * u128::from(words_per_item));
    rng
}

/// A child seed, for handing a whole subtree of randomness to a callee.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).next_u64()
}
