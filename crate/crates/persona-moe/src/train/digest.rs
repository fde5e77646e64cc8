//! Parameter-group digests. Stage-isolation guarantees (frozen base,
//! untouched router, untouched experts) are proven by comparing these hex
//! digests before and after a stage.

use sha2::{Digest, Sha256};

use crate::autodiff::{Real, Tensor};

/// SHA-256 over named tensors: each entry contributes its name, a NUL,
/// its shape, and its values as little-endian f64 bit patterns. Entry
/// order matters and callers must keep it canonical.
pub fn digest_entries<F: Real>(entries: &[(String, &Tensor<F>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in entries {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Digests for the three isolation groups.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GroupDigests {
    /// Backbone weights (embeddings, blocks, head).
    pub base: String,
    /// Every expert's LoRA a/b matrices.
    pub adapters: String,
    /// Persona encoder weights plus expert embeddings.
    pub router: String,
}
