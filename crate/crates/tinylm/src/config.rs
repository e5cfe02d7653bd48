use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a [`crate::Model`].
///
/// The defaults scale down the shape of a mobile-class decoder: grouped KV
/// heads (2 query heads per KV head), a 4x feed-forward expansion, QK-norm and
/// tied input/output embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Training window length in tokens. Evaluation accepts longer inputs.
    pub seq_len: usize,
    pub qk_norm: bool,
    pub tied_embeddings: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            kv_heads: 2,
            dim: 128,
            hidden_dim: 512,
            vocab_size: 260,
            seq_len: 256,
            qk_norm: true,
            tied_embeddings: true,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Two-layer model used by the desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 4,
            kv_heads: 2,
            dim: 32,
            hidden_dim: 128,
            vocab_size: 260,
            seq_len: 64,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("dim", self.dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::Config("norm_eps and rope_base must be positive".into()));
        }
        Ok(())
    }
}
