//! Byte-level tokenizer: ids 0..=255 are raw bytes, specials sit above.

/// Beginning-of-sequence marker.
pub const BOS: u32 = 256;
/// End-of-sequence marker; also terminates the query span inside a packed
/// training sequence.
pub const EOS: u32 = 257;
/// Padding id, reserved in the vocabulary but unused by the unpadded loop.
pub const PAD: u32 = 258;
/// 256 byte values plus BOS/EOS/PAD.
pub const VOCAB_SIZE: usize = 259;

/// Token ids plus a flag marking whether the input was cut at the limit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub truncated: bool,
}

/// Map text to byte ids, cutting at `limit` tokens when given.
pub fn tokenize(text: &str, limit: Option<usize>) -> Encoded {
    let bytes = text.as_bytes();
    match limit {
        Some(l) if bytes.len() > l => Encoded {
            ids: bytes[..l].iter().map(|&b| b as u32).collect(),
            truncated: true,
        },
        _ => Encoded {
            ids: bytes.iter().map(|&b| b as u32).collect(),
            truncated: false,
        },
    }
}

/// Map ids back to text. Special ids are dropped; byte runs that are not
/// valid UTF-8 come back via lossy conversion (cannot happen for ids
/// produced by `tokenize` on real text).
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
