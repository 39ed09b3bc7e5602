//! Deterministic randomness.
//!
//! Every random draw in the pipeline comes from a [`ChaCha8Rng`] stream whose
//! seed is derived from the run seed plus a small set of integer tags
//! (purpose, step index, sample index). Randomness is therefore stateless
//! across the training loop: resuming from step `n` replays the exact same
//! streams as an uninterrupted run, on any platform.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream tags, kept in one place so call sites cannot collide by accident.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const TIMESTEP: u64 = 2;
    pub const DIFFUSION_NOISE: u64 = 3;
    pub const SAMPLER_INIT: u64 = 4;
    pub const SYNTH_SAMPLE: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const DEPTH_STUB: u64 = 7;
    pub const BATCH_ORDER: u64 = 8;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the seed and tags into a 256-bit ChaCha seed.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x51ed_2701_a7b5_e1f3);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Standard-normal tensor of the given shape, drawn from `rng` in row-major order.
pub fn randn_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = normal_vec(rng, n);
    let t = Tensor::from_vec(data, shape, device)?;
    t.to_dtype(dtype)
}

/// Uniform tensor on `[lo, hi)`.
pub fn rand_tensor(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f32,
    hi: f32,
    dtype: DType,
    device: &Device,
) -> candle_core::Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = uniform_vec(rng, n, lo, hi);
    let t = Tensor::from_vec(data, shape, device)?;
    t.to_dtype(dtype)
}
