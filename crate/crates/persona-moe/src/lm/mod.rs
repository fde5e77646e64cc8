//! The toy decoder LM: byte tokenizer, transformer backbone, decoding.

pub mod generate;
pub mod model;
pub mod tokenizer;

pub use generate::{generate, DecodeMode, DecodeParams};
pub use model::{adapted_sites, BaseModel, ModelConfig};
pub use tokenizer::{detokenize, tokenize, Encoded, BOS, EOS, PAD, VOCAB_SIZE};
