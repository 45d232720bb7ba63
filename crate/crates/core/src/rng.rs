//! Named deterministic random streams.
//!
//! Every consumer of randomness (data generation, initialization, training
//! batches, trigger draws, defenses) pulls from its own stream derived from
//! a global seed and a stable label, so any stream can be replayed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub type Stream = ChaCha20Rng;

pub fn stream(seed: u64, label: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(b"dgmlab-stream-v1");
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(digest)
}

pub fn normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

/// `[rows, cols]` matrix of standard normal draws, filled row by row.
pub fn normal_matrix(rng: &mut Stream, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub fn normal_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
