//! Named, counter-based random streams.
//!
//! Every consumer derives its generator from `(seed, stream name, id)`, so a
//! sample's randomness does not depend on how many other samples were drawn
//! before it or on which thread produced it.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, name: &str, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    rng.set_stream(id);
    rng
}
