use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_size: usize,
    /// Joint source/target vocabulary size.
    pub vocab_size: usize,
    pub dropout: f32,
    pub max_len: usize,
    /// Feed adapted constraint keys/values into every attention layer.
    pub attn_integration: bool,
    /// Mix the gated plug-in distribution into the output layer.
    pub output_integration: bool,
}

impl ModelConfig {
    /// The small configuration used for the synthetic task.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_size: 128,
            vocab_size,
            dropout: 0.1,
            max_len: 256,
            attn_integration: true,
            output_integration: true,
        }
    }

    /// The 512-wide, 6+6 layer setting.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn_size: 2048,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".into()));
        }
        if self.ffn_size == 0 || self.vocab_size < 4 || self.max_len == 0 {
            return Err(Error::Config("ffn_size, vocab_size and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
