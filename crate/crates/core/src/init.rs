//! Parameter initialisation and the crate-wide seeded generator.

use alloc::vec::Vec;

use num_traits::Float;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};

/// Deterministic generator used for every random choice in the crate.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded with a splitmix step of the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bound of the Xavier/Glorot uniform distribution for a shape whose first
/// extent is fan-out and last extent is fan-in.
pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    if shape.len() < 2 {
        return Err(contract(
            "xavier initialisation needs at least two extents (biases start at zero)",
        ));
    }
    let fan_out = shape[0] as f64;
    let fan_in = shape[shape.len() - 1] as f64;
    Ok(Float::sqrt(6.0 / (fan_in + fan_out)))
}

pub fn xavier_uniform<T: Real>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    xavier_uniform_with(shape, &mut rng(seed))
}

pub fn xavier_uniform_with<T: Real>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let a = xavier_bound(shape)?;
    let dist = Uniform::new_inclusive(-a, a);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn respects_bound() {
        let d = 37;
        let t = xavier_uniform::<f64>(&[2, d], 9).unwrap();
        let a = (6.0f64 / (2.0 + d as f64)).sqrt();
        assert!(t.data().iter().all(|w| w.abs() <= a));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = xavier_uniform::<f64>(&[8, 5], 42).unwrap();
        let b = xavier_uniform::<f64>(&[8, 5], 42).unwrap();
        let c = xavier_uniform::<f64>(&[8, 5], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_mean_near_zero() {
        let t = xavier_uniform::<f64>(&[100, 100], 7).unwrap();
        let a = (6.0f64 / 200.0).sqrt();
        let sigma = a / 3f64.sqrt();
        let mean: f64 = t.data().iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() <= 3.0 * sigma / 100.0, "mean {mean}");
    }

    #[test]
    fn rejects_vectors() {
        assert!(xavier_uniform::<f64>(&[10], 1).is_err());
    }
}
