//! Persona mixture-of-experts post-training at desk scale.
//!
//! A tiny byte-level decoder LM carries ten low-rank persona adapters whose
//! contributions are blended by a situation-aware router. The crate covers
//! the full loop: trait-labeled data synthesis, staged training (expert
//! warm-up, router contrastive fit, joint tuning), checkpointing, and an
//! inference/eval CLI.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experts;
pub mod lm;
pub mod pole;
pub mod router;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
