use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a decoder-only transformer with a shared exit head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_context: usize,
    pub ffn_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers < 1 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "dim {} must be divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if self.vocab < 2 {
            return fail("vocab must be at least 2".into());
        }
        if self.max_context < 1 {
            return fail("max_context must be at least 1".into());
        }
        if self.ffn_hidden < 1 {
            return fail("ffn_hidden must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Parameters per transformer block: two norm gains, four attention
    /// projections and the three gated-FFN matrices.
    pub fn block_param_count(&self) -> usize {
        2 * self.dim + 4 * self.dim * self.dim + 3 * self.dim * self.ffn_hidden
    }

    pub fn param_count(&self) -> usize {
        let embed = self.vocab * self.dim;
        let head = self.dim + self.dim * self.vocab;
        embed + self.n_layers * self.block_param_count() + head
    }

    /// Small default used by tests and the CLI.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 4,
            dim: 32,
            n_heads: 4,
            vocab: crate::tokenizer::VOCAB_SIZE,
            max_context: 128,
            ffn_hidden: 64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.vocab = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.max_context = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.dim = 12;
        c.n_heads = 4; // head dim 3 is odd
        assert!(c.validate().is_err());
    }
}
