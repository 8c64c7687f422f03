use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id available to content tokens.
pub const FIRST_CONTENT_TOKEN: usize = 4;

/// Decoder hyper-parameters. `d_encoder` is the width of the shared frozen
/// encoder output consumed by cross-attention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub d_encoder: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn student() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            n_decoder_layers: 2,
            d_ff: 128,
            d_encoder: 64,
            max_src_len: 64,
            max_tgt_len: 16,
            seed: 0,
        }
    }

    pub fn teacher() -> Self {
        Self {
            d_model: 128,
            n_decoder_layers: 6,
            d_ff: 256,
            ..Self::student()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("d_encoder", self.d_encoder),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*name, "must be >= 1"));
        }
        if self.vocab_size < FIRST_CONTENT_TOKEN {
            return Err(Error::config(
                "vocab_size",
                "must be >= 4 (pad, bos, eos, unk are reserved)",
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

/// Exact trainable parameter count of the decoder described by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (v, d, f, e) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.d_encoder);
    let per_layer = 3 * 2 * d // three layer norms
        + 4 * d * d // self-attention q, k, v, o
        + 2 * d * d + 2 * e * d // cross-attention q, o and k, v from encoder width
        + 3 * d * f; // SwiGLU gate, up, down
    v * d + cfg.n_decoder_layers * per_layer + 2 * d + d * v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::student().validate().unwrap();
        ModelConfig::teacher().validate().unwrap();
    }

    #[test]
    fn rejects_bad_heads_and_vocab() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::student()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "n_heads"));
        let cfg = ModelConfig {
            vocab_size: 3,
            ..ModelConfig::student()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn teacher_is_larger() {
        assert!(param_count(&ModelConfig::teacher()) > param_count(&ModelConfig::student()));
    }

    #[test]
    fn doubling_layers_more_than_doubles_minus_shared() {
        let one = ModelConfig::student();
        let two = ModelConfig {
            n_decoder_layers: one.n_decoder_layers * 2,
            ..one.clone()
        };
        let shared = 2 * one.vocab_size * one.d_model + 2 * one.d_model;
        assert_eq!(
            param_count(&two) - shared,
            2 * (param_count(&one) - shared)
        );
        assert!(param_count(&two) < 2 * param_count(&one));
    }

    #[test]
    fn hash_depends_on_every_field() {
        let a = ModelConfig::student();
        let b = a.clone().with_seed(1);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ModelConfig::student().hash());
    }
}
