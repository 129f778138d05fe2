//! Seeded random streams.
//!
//! One run seed fans out into independent ChaCha streams, one per consumer,
//! so e.g. changing the shuffle order never perturbs parameter init.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Noise = 2,
    Shuffle = 3,
    Validate = 4,
    Synthetic = 5,
    Sample = 6,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Standard normal draws.
pub fn normal_tensor<T: Real, R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v)
    })
}
