//! Seeded randomness. All stochastic choices (initialization, dropout,
//! shuffling) draw from ChaCha8, which is fully specified and portable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Float, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from a base seed and a purpose tag.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound == 0.0 {
                T::zero()
            } else {
                T::from_f64(rng.gen_range(-bound..bound))
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
