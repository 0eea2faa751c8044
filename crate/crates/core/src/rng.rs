//! Deterministic, named random streams.
//!
//! Every source of randomness in a run is drawn from a stream identified
//! by `(master_seed, stream_name, salt)`. The three parts are packed into
//! a 32-byte ChaCha8 seed, so reordering one consumer (say, sampling)
//! never perturbs another (say, shuffling), and any stream can be
//! reproduced in isolation.

use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STREAM_INIT: &str = "init";
pub const STREAM_DEQUANT: &str = "dequant";
pub const STREAM_SAMPLE: &str = "sample";
pub const STREAM_SHUFFLE: &str = "shuffle";

/// Build the RNG for one named stream.
///
/// Seed layout: bytes 0..8 the master seed (little-endian), bytes 8..16
/// the salt (little-endian), bytes 16..32 the stream name truncated or
/// zero-padded to 16 bytes.
pub fn stream_rng(master_seed: u64, stream: &str, salt: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&salt.to_le_bytes());
    let name = stream.as_bytes();
    let take = name.len().min(16);
    seed[16..16 + take].copy_from_slice(&name[..take]);
    ChaCha8Rng::from_seed(seed)
}

/// Tensor of i.i.d. standard normal draws.
pub fn normal_tensor<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> TensorBase<S> {
    TensorBase::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        S::of(v)
    })
}

/// Tensor of i.i.d. Uniform[0,1) draws.
pub fn uniform_tensor<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> TensorBase<S> {
    TensorBase::from_fn(shape, |_| S::of(rng.gen::<f64>()))
}
