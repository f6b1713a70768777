//! Deterministic randomness.
//!
//! [`SeededRng`] drives synthetic instance generation. [`NoiseStream`] is the
//! oracle's counter-based source: the ChaCha key is derived from
//! `(seed, query checksum)` and each draw index selects an independent
//! ChaCha stream, so `(seed, query bytes, draw index)` fixes the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::manifold::qr_retraction;
use crate::matrix::Matrix;
use crate::tensor::{Shape, Tensor3};

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded generator for instances, starting points and random projectors.
pub struct SeededRng {
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-generator for a labelled purpose within one seed.
    pub fn derive(seed: u64, label: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(label)))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    pub fn gaussian_tensor(&mut self, shape: Shape) -> Tensor3 {
        let n = shape.iter().product();
        Tensor3::from_raw(shape, self.gaussian_vec(n))
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_raw(rows, cols, self.gaussian_vec(rows * cols))
    }

    /// Random `n x p` matrix with orthonormal columns (QR of a Gaussian).
    pub fn orthonormal(&mut self, n: usize, p: usize) -> Matrix {
        loop {
            let g = self.gaussian_matrix(n, p);
            if let Ok(q) = qr_retraction(&g) {
                return q.into_matrix();
            }
        }
    }
}

/// Counter-based Gaussian noise source keyed by oracle seed and query checksum.
#[derive(Clone, Copy, Debug)]
pub struct NoiseStream {
    key: [u8; 32],
}

impl NoiseStream {
    pub fn new(seed: u64, query_checksum: u32) -> Self {
        let mut key = [0u8; 32];
        let mut state =
            splitmix64(seed) ^ splitmix64(0x5151_0000_0000_0000 | query_checksum as u64);
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { key }
    }

    /// `n` standard normal samples for draw `index`.
    pub fn standard_normals(&self, index: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha20Rng::from_seed(self.key);
        rng.set_stream(index);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }
}
