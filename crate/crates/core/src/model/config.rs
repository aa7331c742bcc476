use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of an encoder or decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Dropout rate in training mode; evaluation never drops.
    pub dropout: f32,
    pub layer_norm_eps: f64,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f32,
}

impl ModelConfig {
    /// Small preset that trains on a laptop CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            hidden_size: 64,
            num_blocks: 2,
            num_heads: 4,
            ffn_size: 256,
            max_len: 64,
            vocab_size,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.1,
        }
    }

    /// DistilBERT-sized preset.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            hidden_size: 768,
            num_blocks: 6,
            num_heads: 12,
            ffn_size: 3072,
            max_len: 512,
            init_std: 0.02,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(
                "max_len must leave room for [CLS] and [SEP]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.layer_norm_eps <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::Config(
                "layer_norm_eps and init_std must be positive".into(),
            ));
        }
        Ok(())
    }
}
