use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A sample addressed by subject position and row within that subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub subject: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × M × d_in`.
    pub patches: Tensor,
    pub subject_index: Vec<usize>,
    /// `B × C`.
    pub labels: Tensor,
    pub f_llv: Tensor,
    pub f_hlv: Tensor,
    pub stimulus_ids: Vec<String>,
    pub refs: Vec<SampleRef>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

/// Shuffled batches over the pooled training samples of every subject.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pool: Vec<SampleRef>,
    batch_size: usize,
    seed: u64,
}

impl BatchStream {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / self.batch_size
    }

    /// Batches for one epoch. The order depends only on `(seed, epoch)`; the
    /// short tail is dropped.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<SampleRef>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order = self.pool.clone();
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.batch_size)
            .map(<[SampleRef]>::to_vec)
            .collect()
    }
}

/// `train[s]` lists the training rows of subject `s`.
pub fn make_batches(train: &[Vec<usize>], batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} is too small for similarity losses"
        )));
    }
    let pool: Vec<SampleRef> = train
        .iter()
        .enumerate()
        .flat_map(|(subject, rows)| rows.iter().map(move |&sample| SampleRef { subject, sample }))
        .collect();
    if pool.len() < batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} training samples cannot fill a batch of {batch_size}",
            pool.len()
        )));
    }
    Ok(BatchStream {
        pool,
        batch_size,
        seed,
    })
}
