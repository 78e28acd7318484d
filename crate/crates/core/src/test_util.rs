use alloc::vec::Vec;

use crate::numerics::{Real, Tensor};
use crate::rng;

/// Standard-normal tensor scaled by `std`.
pub fn randn<T: Real>(shape: &[usize], seed: u64, std: f64) -> Tensor<T> {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng::normal(&mut r) * std)).collect();
    Tensor::new(shape, data).unwrap()
}
