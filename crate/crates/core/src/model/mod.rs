//! Frozen feature extractor and trainable transformer decoder.

mod config;
mod decoder;
mod encoder;
mod snapshot;

pub use config::{param_count, ModelConfig, BOS, EOS, FIRST_CONTENT_TOKEN, PAD, UNK};
pub use decoder::{attention, causal_mask, swiglu, BoundParams, Decoder};
pub use encoder::{sinusoidal_positions, EncoderConfig, FrozenEncoder};
pub use snapshot::{ModelSnapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
