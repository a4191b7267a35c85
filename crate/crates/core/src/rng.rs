//! Deterministic randomness.
//!
//! Every random stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`, a
//! counter-based stream cipher with a platform-independent output sequence)
//! seeded from a 64-bit value. Seeds for a particular purpose are derived from
//! the master seed with [`derive_seed`], which chains SplitMix64 finalisers over
//! `(master, FNV-1a(purpose), client, round)`. Because a stream depends only on
//! that tuple, results do not depend on the order in which clients run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{with_dtype, DType, Elem, Tensor};

pub type SeededRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a hash of a purpose tag.
pub fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(master: u64, purpose: &str, client: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ fnv1a(purpose));
    h = splitmix64(h ^ client);
    splitmix64(h ^ round)
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    Zeros,
    Ones,
    Gaussian { std: f64 },
    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    UniformKaiming { fan_in: usize },
}

/// Identical output for identical `(shape, scheme, seed, dtype)` on every platform.
/// Values are drawn in f64 and rounded to the target dtype.
pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = match scheme {
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Ones => vec![1.0; n],
        InitScheme::Gaussian { std } => {
            let mut rng = rng_from_seed(seed);
            (0..n).map(|_| std * standard_normal(&mut rng)).collect()
        }
        InitScheme::UniformKaiming { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = rng_from_seed(seed);
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    };
    with_dtype!(dtype, T => Tensor::from_vec::<T>(shape, values.into_iter().map(T::of).collect()).expect("shape product"))
}
