//! Benchmark-only crate; see `benches/pipeline.rs`.
//!
//! Shared input builders live here so the bench targets stay declarative.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use gaitvlm_core::Tensor;

/// Deterministic standard-normal matrix, for synthetic clips and prefixes.
pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
        .unwrap()
}

/// Deterministic standard-normal vector.
pub fn seeded_vector(len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Tensor::vector((0..len).map(|_| normal.sample(&mut rng)).collect())
}
