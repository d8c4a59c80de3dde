//! Reverse-mode differentiation, network blocks, the optimizer, and
//! checkpoint I/O. Everything runs on 64-bit reals, single-threaded per
//! [`ParamStore`]; independent stores may live on different threads.

pub mod checkpoint;
pub mod graph;
pub mod nets;
pub mod store;

pub use graph::{Grads, Graph, NodeId};
pub use nets::{check_gradients, forward_backward, GruCell, Mlp};
pub use store::{AdamConfig, ParamGroup, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream seed from a base seed, a role tag, and an
/// index, via a splitmix-style finalizer. Distinct (tag, index) pairs give
/// decorrelated streams; the same triple always gives the same seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h
}

/// Seeded RNG for the given role.
pub fn rng_for(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Draw from a unit normal via Box-Muller. Two uniforms per call keeps the
/// stream layout independent of any library sampling internals.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * libm::log(u1)).sqrt() * libm::cos(std::f64::consts::TAU * u2)
}
