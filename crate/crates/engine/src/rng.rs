//! Deterministic stream derivation. Every random decision in the engine is
//! a pure function of the master seed plus stable identifiers (image index,
//! global gaussian id, event counter), so trajectories do not depend on the
//! worker count.

/// SplitMix64 step; good avalanche behavior for combining identifiers.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed with a stream tag and two identifiers.
pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed ^ tag);
    h = splitmix(h ^ a);
    splitmix(h ^ b)
}

/// Stream tags; distinct per use so streams never collide.
pub mod tag {
    pub const VIEW_STREAM: u64 = 0x5649_4557;
    pub const DENSIFY: u64 = 0x4445_4e53;
    pub const REBALANCE: u64 = 0x5245_4241;
    pub const SHARD: u64 = 0x5348_5244;
    pub const SYNTH: u64 = 0x53_594e;
    pub const EXPERIMENT: u64 = 0x4558_5052;
}

/// Train-view index for the image at position `image_index` in the stream.
pub fn view_for_image(seed: u64, train_count: usize, image_index: u64) -> usize {
    (derive(seed, tag::VIEW_STREAM, image_index, 0) % train_count as u64) as usize
}
