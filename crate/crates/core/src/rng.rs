//! Seeded sampling helpers over ChaCha8, a counter-based generator whose
//! state is `(seed, stream, word position)`.

use rand_chacha::rand_core::{Rng as _, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `[0, 1)` with 53 random bits.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)`.
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Standard normal by Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Normal with standard deviation `std`, resampled outside `±2 std`.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if libm::fabs(z) <= 2.0 {
            return z * std;
        }
    }
}

pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Serialised generator state: seed (32) | stream (8, LE) | word pos (16, LE).
pub fn state_bytes(rng: &ChaCha8Rng) -> [u8; 56] {
    let mut out = [0u8; 56];
    out[..32].copy_from_slice(&rng.get_seed());
    out[32..40].copy_from_slice(&rng.get_stream().to_le_bytes());
    out[40..].copy_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn from_state_bytes(bytes: &[u8]) -> Option<ChaCha8Rng> {
    if bytes.len() != 56 {
        return None;
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().ok()?));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..].try_into().ok()?));
    Some(rng)
}
