//! Unicode helpers shared by ingestion, retrieval and scoring.
//!
//! All character offsets in this crate count Unicode scalar values of the
//! NFC-normalized string, never bytes or grapheme clusters.

use unicode_normalization::UnicodeNormalization;

/// NFC-normalizes `s`.
pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// Number of code points in the NFC form of `s`.
pub fn nfc_len(s: &str) -> usize {
    s.nfc().count()
}

/// Slices `text` by a `[start, end)` code-point range.
///
/// Returns `None` when the range is empty, inverted or out of bounds.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start >= end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let begin = indices.nth(start)?;
    let finish = indices.nth(end - start - 1)?;
    Some(&text[begin..finish])
}

/// Splits on Unicode whitespace after NFC normalization and lowercases.
///
/// Lowercasing is the identity for caseless scripts such as Arabic-script
/// Farsi, so case-folding only takes effect where the script defines case.
pub fn tokenize(s: &str) -> Vec<String> {
    nfc(s).split_whitespace().map(str::to_lowercase).collect()
}

/// Lowercase hex SHA-256 digest of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
