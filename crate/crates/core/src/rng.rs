//! Reproducible random-number streams.
//!
//! Every realization draws from its own counter-indexed substream keyed by
//! `(seed, stream)`, so ensembles produce identical results no matter how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// RNG for substream `stream` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent seed for a tagged sub-task (splitmix64 step).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `len` iid standard normals from substream `stream`.
pub fn standard_normal_vec(seed: u64, stream: u64, len: usize) -> Vec<f64> {
    let rng = stream_rng(seed, stream);
    StandardNormal.sample_iter(rng).take(len).collect()
}

/// `n` uniform points in `[0, lx] x [0, ly]` from substream `stream`.
pub fn uniform_points(seed: u64, stream: u64, n: usize, lx: f64, ly: f64) -> Vec<[f64; 2]> {
    use rand::Rng;
    let mut rng = stream_rng(seed, stream);
    (0..n).map(|_| [rng.gen_range(0.0..lx), rng.gen_range(0.0..ly)]).collect()
}
