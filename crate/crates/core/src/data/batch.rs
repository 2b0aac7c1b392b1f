use rand::seq::SliceRandom;

use crate::error::{Result, SvaeError};
use crate::rng::{derive_seed, seeded};

/// Index batches over `n` records.
///
/// Training order is a pure function of `(seed, epoch)`; evaluation order is
/// sequential and keeps the final partial batch.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch_size: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(SvaeError::contract("batch size must be positive"));
        }
        if n == 0 {
            return Err(SvaeError::contract("cannot batch an empty dataset"));
        }
        Ok(BatchIterator { n, batch_size })
    }

    pub fn permutation(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut seeded(derive_seed(seed, &[0xba7c, epoch])));
        idx
    }

    /// Shuffled full batches; the trailing partial batch is dropped.
    pub fn train_batches(&self, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        self.permutation(seed, epoch)
            .chunks_exact(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn train_batch_count(&self) -> usize {
        self.n / self.batch_size
    }

    /// Sequential batches covering every record.
    pub fn eval_batches(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .collect::<Vec<_>>()
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}
