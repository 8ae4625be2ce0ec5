//! Seeding.
//!
//! One 64-bit master seed is expanded into independent substreams with
//! splitmix64: the seed of stream `k` is the `(k+1)`-th output of a
//! splitmix64 generator started at the master seed, i.e.
//! `mix(master + (k+1) * 0x9E3779B97F4A7C15)` with the standard
//! splitmix64 finalizer. Each substream drives a `ChaCha8Rng`; Gaussian
//! draws come from `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::array::DenseArray;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Named substreams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 0,
    Training = 1,
    Noise = 2,
    Timestep = 3,
    Probe = 4,
    HeldOut = 5,
    Init = 6,
}

pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `stream` under `master`.
pub fn substream_seed(master: u64, stream: Stream) -> u64 {
    let k = stream as u64 + 1;
    splitmix64_mix(master.wrapping_add(k.wrapping_mul(GOLDEN_GAMMA)))
}

pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, stream))
}

/// Standard normal array of the given shape.
pub fn normal_array(rng: &mut impl Rng, shape: &[usize]) -> DenseArray {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseArray::new(shape.to_vec(), data).expect("normal_array shape")
}
