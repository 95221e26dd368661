//! Seeded RNG streams.
//!
//! The tensor backend's CPU RNG cannot be seeded, so every random draw in this
//! crate comes from ChaCha20 streams derived from the run seed. Each purpose
//! gets its own stream id, which keeps draws independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCH: u64 = 2;
pub const STREAM_SYNTH: u64 = 3;
pub const STREAM_SAMPLER: u64 = 4;

/// RNG for (seed, stream); same pair always yields the same sequence.
pub fn stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal draws as a plain vector.
pub fn normal_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
