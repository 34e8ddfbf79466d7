use ndarray::ArrayD;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Deterministic RNG used everywhere parameters or noise are sampled.
/// ChaCha gives identical streams across platforms for a fixed seed.
pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Folds a component tag into a base seed (FNV-1a over the tag bytes).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// Derives an independent stream for a named component from a base seed.
pub fn derive(seed: u64, tag: &str) -> Prng {
    Prng::seed_from_u64(derive_seed(seed, tag))
}

/// Normal(0, std) truncated to +-2 std by resampling.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Prng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    })
}

/// Fan-in-scaled normal used for convolution kernels: std = sqrt(2 / fan_in).
pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut Prng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("fan_in must be positive");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || dist.sample(rng))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Prng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.random_range(lo..hi))
}
