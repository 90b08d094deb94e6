//! Training batches: contiguous non-overlapping windows, shuffled per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Yields `(inputs, targets)` batches of `batch_size × context_len`. Window
/// `i` covers tokens `[i·C, i·C + C]`; targets are inputs shifted by one.
#[derive(Debug, Clone)]
pub struct Batcher {
    tokens: Vec<u32>,
    context_len: usize,
    batch_size: usize,
    seed: u64,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
}

impl Batcher {
    pub fn new(tokens: &[u32], context_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if context_len == 0 || batch_size == 0 {
            return Err(Error::Config(
                "context_len and batch_size must be positive".into(),
            ));
        }
        if tokens.len() < context_len + 1 {
            return Err(Error::Config(format!(
                "corpus of {} tokens is shorter than context_len + 1 = {}",
                tokens.len(),
                context_len + 1
            )));
        }
        let mut b = Batcher {
            tokens: tokens.to_vec(),
            context_len,
            batch_size,
            seed,
            order: Vec::new(),
            epoch: 0,
            cursor: 0,
        };
        b.shuffle();
        Ok(b)
    }

    pub fn n_windows(&self) -> usize {
        (self.tokens.len() - 1) / self.context_len
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n_windows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> (TokenBatch, Vec<u32>) {
        let c = self.context_len;
        let mut inputs = Vec::with_capacity(self.batch_size * c);
        let mut targets = Vec::with_capacity(self.batch_size * c);
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            let start = self.order[self.cursor] * c;
            self.cursor += 1;
            inputs.extend_from_slice(&self.tokens[start..start + c]);
            targets.extend_from_slice(&self.tokens[start + 1..start + c + 1]);
        }
        let batch = TokenBatch::new(self.batch_size, c, inputs).expect("sized by construction");
        (batch, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_corpus_each_epoch() {
        let tokens: Vec<u32> = (0..41).collect();
        let mut b = Batcher::new(&tokens, 4, 2, 9).unwrap();
        assert_eq!(b.n_windows(), 10);
        let mut starts = Vec::new();
        for _ in 0..5 {
            let (x, y) = b.next_batch();
            for r in 0..2 {
                let row = &x.tokens[r * 4..(r + 1) * 4];
                assert_eq!(
                    &y[r * 4..(r + 1) * 4],
                    &row.iter().map(|t| t + 1).collect::<Vec<_>>()[..]
                );
                starts.push(row[0]);
            }
        }
        starts.sort();
        assert_eq!(starts, (0..10).map(|i| i * 4).collect::<Vec<_>>());
        assert_eq!(b.epoch(), 0);
        b.next_batch();
        assert_eq!(b.epoch(), 1);
    }

    #[test]
    fn deterministic_and_seeded() {
        let tokens: Vec<u32> = (0..200).collect();
        let mut a = Batcher::new(&tokens, 8, 3, 1).unwrap();
        let mut b = Batcher::new(&tokens, 8, 3, 1).unwrap();
        let mut c = Batcher::new(&tokens, 8, 3, 2).unwrap();
        let xa: Vec<_> = (0..20).map(|_| a.next_batch()).collect();
        let xb: Vec<_> = (0..20).map(|_| b.next_batch()).collect();
        let xc: Vec<_> = (0..20).map(|_| c.next_batch()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn too_small() {
        assert!(Batcher::new(&[1, 2, 3], 3, 1, 0).is_err());
        assert!(Batcher::new(&[1, 2, 3, 4], 3, 1, 0).is_ok());
    }
}
