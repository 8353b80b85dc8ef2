//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by a
//! master seed and a 64-bit stream id, so independent pieces (partitions,
//! components, dataset splits) never share state and stay reproducible when
//! their neighbours change size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a (component, index) pair into a stream id.
pub(crate) fn stream_id(component: u32, index: u32) -> u64 {
    ((component as u64) << 32) | index as u64
}
