//! Unified key/value + exit-state ("KVQ") cache for incremental decoding.
//!
//! Layers below the exit layer may hold K/V for uncommitted draft positions.
//! Layers at or above it only ever hold committed positions, plus the exit
//! states (inputs to the exit layer) needed to resume those layers later.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Rope, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct KvqCache<T = f32> {
    n_layers: usize,
    dim: usize,
    capacity: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    valid_len: Vec<usize>,
    committed_len: usize,
    exit_layer: usize,
    exit_start: usize,
    exit_states: Vec<T>,
    units: u64,
    rope: Rope<T>,
}

impl<T: Scalar> KvqCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        let slab = config.max_context * config.dim;
        KvqCache {
            n_layers: config.n_layers,
            dim: config.dim,
            capacity: config.max_context,
            keys: vec![vec![T::zero(); slab]; config.n_layers],
            values: vec![vec![T::zero(); slab]; config.n_layers],
            valid_len: vec![0; config.n_layers],
            committed_len: 0,
            exit_layer: config.n_layers,
            exit_start: 0,
            exit_states: Vec::new(),
            units: 0,
            rope: Rope::new(config.head_dim(), config.max_context),
        }
    }

    pub(crate) fn rope(&self) -> &Rope<T> {
        &self.rope
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn valid_len(&self, layer: usize) -> usize {
        self.valid_len[layer]
    }

    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    /// Post-rotary key of `pos` at `layer`.
    pub fn key(&self, layer: usize, pos: usize) -> &[T] {
        debug_assert!(pos < self.valid_len[layer]);
        &self.keys[layer][pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[T] {
        debug_assert!(pos < self.valid_len[layer]);
        &self.values[layer][pos * self.dim..(pos + 1) * self.dim]
    }

    pub(crate) fn layer_keys(&self, layer: usize, len: usize) -> &[T] {
        &self.keys[layer][..len * self.dim]
    }

    pub(crate) fn layer_values(&self, layer: usize, len: usize) -> &[T] {
        &self.values[layer][..len * self.dim]
    }

    /// Writes K/V for the next position of `layer`.
    pub(crate) fn push_kv(&mut self, layer: usize, key: &[T], value: &[T]) -> Result<()> {
        let pos = self.valid_len[layer];
        if pos >= self.capacity {
            return Err(Error::ContextOverflow {
                needed: pos + 1,
                max: self.capacity,
            });
        }
        let span = pos * self.dim..(pos + 1) * self.dim;
        self.keys[layer][span.clone()].copy_from_slice(key);
        self.values[layer][span].copy_from_slice(value);
        self.valid_len[layer] = pos + 1;
        Ok(())
    }

    /// Layer index whose input the stored exit states are.
    pub fn exit_layer(&self) -> usize {
        self.exit_layer
    }

    /// Positions `[start, end)` that have an exit state.
    pub fn exit_range(&self) -> std::ops::Range<usize> {
        self.exit_start..self.exit_start + self.exit_states.len() / self.dim
    }

    pub fn exit_state(&self, pos: usize) -> Option<&[T]> {
        self.exit_range().contains(&pos).then(|| {
            let i = pos - self.exit_start;
            &self.exit_states[i * self.dim..(i + 1) * self.dim]
        })
    }

    /// Appends exit states for positions starting at `start`. Non-contiguous
    /// or different-layer states replace what is stored.
    pub(crate) fn record_exit_states(&mut self, layer: usize, start: usize, rows: &[T]) {
        let contiguous = !self.exit_states.is_empty()
            && self.exit_layer == layer
            && self.exit_range().end == start;
        if !contiguous {
            self.exit_states.clear();
            self.exit_layer = layer;
            self.exit_start = start;
        }
        self.exit_states.extend_from_slice(rows);
    }

    pub fn clear_exit_states(&mut self) {
        self.exit_states.clear();
        self.exit_start = self.committed_len;
    }

    /// Marks the first `len` positions as committed. Every layer must
    /// already hold them.
    pub fn commit(&mut self, len: usize) -> Result<()> {
        if let Some(l) = (0..self.n_layers).find(|&l| self.valid_len[l] < len) {
            return Err(Error::Cache(format!(
                "cannot commit {len} positions: layer {l} holds {}",
                self.valid_len[l]
            )));
        }
        self.committed_len = len;
        Ok(())
    }

    /// Discards everything at positions `>= len` in every layer, including
    /// exit states, and commits what remains (at most `len` positions).
    pub fn truncate(&mut self, len: usize) {
        for v in self.valid_len.iter_mut() {
            *v = (*v).min(len);
        }
        let range = self.exit_range();
        if range.end > len {
            let keep = len.saturating_sub(range.start);
            self.exit_states.truncate(keep * self.dim);
        }
        self.committed_len = self.valid_len.iter().copied().fold(len, usize::min);
    }

    /// Layer-token units executed through this cache: one per block applied
    /// to one position.
    pub fn units(&self) -> u64 {
        self.units
    }

    pub(crate) fn add_units(&mut self, n: u64) {
        self.units += n;
    }

    pub fn reset_units(&mut self) {
        self.units = 0;
    }

    /// Largest absolute difference against another cache over the first
    /// `len` positions of every layer.
    pub fn max_abs_diff(&self, other: &KvqCache<T>, len: usize) -> Option<f64> {
        if self.n_layers != other.n_layers || self.dim != other.dim {
            return None;
        }
        let mut worst = 0.0f64;
        for l in 0..self.n_layers {
            if self.valid_len[l] < len || other.valid_len[l] < len {
                return None;
            }
            let n = len * self.dim;
            for (a, b) in self.keys[l][..n]
                .iter()
                .zip(&other.keys[l][..n])
                .chain(self.values[l][..n].iter().zip(&other.values[l][..n]))
            {
                worst = worst.max((a.to_f64_lossy() - b.to_f64_lossy()).abs());
            }
        }
        Some(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            dim: 4,
            n_heads: 2,
            vocab: 10,
            max_context: 5,
            ffn_hidden: 8,
        }
    }

    #[test]
    fn push_truncate_commit() {
        let mut c = KvqCache::<f32>::new(&cfg());
        for l in 0..3 {
            c.push_kv(l, &[1.0; 4], &[2.0; 4]).unwrap();
        }
        c.push_kv(0, &[3.0; 4], &[3.0; 4]).unwrap();
        assert!(c.commit(2).is_err());
        c.commit(1).unwrap();
        assert_eq!(c.valid_len(0), 2);
        c.truncate(1);
        assert_eq!(c.valid_len(0), 1);
        assert_eq!(c.committed_len(), 1);
        assert_eq!(c.key(0, 0), &[1.0; 4]);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut c = KvqCache::<f32>::new(&cfg());
        for _ in 0..5 {
            c.push_kv(0, &[0.0; 4], &[0.0; 4]).unwrap();
        }
        assert!(matches!(
            c.push_kv(0, &[0.0; 4], &[0.0; 4]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn exit_states_append_and_truncate() {
        let mut c = KvqCache::<f32>::new(&cfg());
        c.record_exit_states(1, 2, &[1.0; 4]);
        c.record_exit_states(1, 3, &[2.0; 8]);
        assert_eq!(c.exit_range(), 2..5);
        assert_eq!(c.exit_state(4), Some(&[2.0f32; 4][..]));
        assert_eq!(c.exit_state(1), None);
        // non-contiguous start replaces
        c.record_exit_states(1, 0, &[5.0; 4]);
        assert_eq!(c.exit_range(), 0..1);
        c.record_exit_states(1, 1, &[6.0; 8]);
        c.truncate(2);
        assert_eq!(c.exit_range(), 0..2);
    }
}
