//! Deterministic stream derivation. Every random draw in the crate goes
//! through a ChaCha8 generator whose stream id is derived from a tag, so
//! two call sites sharing a seed never share a stream unless they ask to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, enough to spread short tags over the stream space.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag_hash(tag));
    rng
}

/// Mix a tag into a seed, for handing a child seed to another component.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut z = seed ^ tag_hash(tag);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
