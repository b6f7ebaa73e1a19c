//! Seeded random streams and random matrix helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::spectral::SymMatrix;

/// Independent deterministic stream `stream` derived from a base seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `B B^T` with `B` an `n x k` standard Gaussian matrix.
pub fn gaussian_psd(rng: &mut impl Rng, n: usize, k: usize) -> SymMatrix {
    let mut m = SymMatrix::zeros(n);
    for _ in 0..k {
        m.add_scaled(&SymMatrix::outer(&gaussian_vec(rng, n)), 1.0);
    }
    m
}

pub fn gaussian_sym(rng: &mut impl Rng, n: usize) -> SymMatrix {
    SymMatrix::new(n, gaussian_vec(rng, n * n)).expect("finite gaussian entries")
}
