//! Embedding providers, the embedding cache, and cosine similarity.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::text::{nfc, sha256_hex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no texts to embed")]
    EmptyBatch,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// A text encoder. Identical text must yield an identical vector for the
/// lifetime of one provider id.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier; part of every bank fingerprint.
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Largest number of texts sent in one call.
    fn batch_limit(&self) -> usize {
        64
    }
    /// Longest accepted input in characters, if bounded.
    fn max_chars(&self) -> Option<usize> {
        None
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Offline fallback encoder: L2-normalized hashed character n-gram counts.
///
/// Text is NFC-normalized and lowercased, then every window of `n` code
/// points is hashed (FNV-1a 64) into one of `dimension` buckets. Texts
/// shorter than `n` contribute a single gram. Empty text maps to the zero
/// vector.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    n: usize,
    dimension: usize,
    id: String,
}

pub const DEFAULT_NGRAM: usize = 3;
pub const DEFAULT_HASHED_DIMENSION: usize = 512;

impl HashedNgramEmbedder {
    pub fn new(n: usize, dimension: usize) -> Self {
        assert!(n > 0 && dimension > 0, "n-gram size and dimension must be positive");
        Self { n, dimension, id: format!("hashed-ngram-v1:n={n}:d={dimension}") }
    }

    /// Reconstructs an embedder from its provider id.
    pub fn from_id(id: &str) -> Option<Self> {
        let rest = id.strip_prefix("hashed-ngram-v1:n=")?;
        let (n, d) = rest.split_once(":d=")?;
        let (n, d) = (n.parse().ok()?, d.parse().ok()?);
        (n > 0 && d > 0).then(|| Self::new(n, d))
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let chars: Vec<char> = nfc(text).to_lowercase().chars().collect();
        let mut counts = vec![0f64; self.dimension];
        if !chars.is_empty() {
            let width = self.n.min(chars.len());
            let mut buf = String::new();
            for window in chars.windows(width) {
                buf.clear();
                buf.extend(window);
                let bucket = (fnv1a64(buf.as_bytes()) % self.dimension as u64) as usize;
                counts[bucket] += 1.0;
            }
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; self.dimension];
        }
        counts.iter().map(|c| (c / norm) as f32).collect()
    }
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_NGRAM, DEFAULT_HASHED_DIMENSION)
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn batch_limit(&self) -> usize {
        1024
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

type VectorCache = RwLock<HashMap<(String, String), Arc<Vec<f32>>>>;

/// Provider wrapper that memoizes vectors by `(provider id, text hash)`.
///
/// Concurrent inserts of the same key are harmless: values are identical by
/// the determinism contract, so the last writer wins.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: VectorCache,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self { provider, cache: RwLock::new(HashMap::new()) }
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().expect("embedding cache poisoned").len()
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }

    /// Embeds `texts` in order, calling the provider only for cache misses.
    ///
    /// Inputs longer than the provider's limit are truncated with a warning.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let provider_id = self.provider.id().to_string();
        let prepared: Vec<String> = texts.iter().map(|t| self.truncate(t)).collect();
        let keys: Vec<(String, String)> =
            prepared.iter().map(|t| (provider_id.clone(), sha256_hex(t.as_bytes()))).collect();

        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.read().expect("embedding cache poisoned");
            let mut queued = std::collections::HashSet::new();
            for (idx, key) in keys.iter().enumerate() {
                if !cache.contains_key(key) && queued.insert(key.clone()) {
                    missing.push(idx);
                }
            }
        }

        let expected = self.provider.dimension();
        for chunk in missing.chunks(self.provider.batch_limit().max(1)) {
            let batch: Vec<String> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let vectors = self.provider.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::ProviderUnavailable(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            if let Some(bad) = vectors.iter().find(|v| v.len() != expected) {
                return Err(EmbedError::DimensionMismatch { expected, actual: bad.len() });
            }
            let mut cache = self.cache.write().expect("embedding cache poisoned");
            for (&idx, vector) in chunk.iter().zip(vectors) {
                cache.insert(keys[idx].clone(), Arc::new(vector));
            }
        }

        let cache = self.cache.read().expect("embedding cache poisoned");
        Ok(keys.iter().map(|k| cache[k].as_ref().clone()).collect())
    }

    fn truncate(&self, text: &str) -> String {
        match self.provider.max_chars() {
            Some(limit) if text.chars().count() > limit => {
                log::warn!("truncating text of {} chars to provider limit {limit}", text.chars().count());
                text.chars().take(limit).collect()
            }
            _ => text.to_string(),
        }
    }
}

/// `(u . v) / (|u| |v|)`, accumulated in `f64` and clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0f64;
    let mut uu = 0.0f64;
    let mut vv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: HashedNgramEmbedder,
        calls: AtomicUsize,
        texts: AtomicUsize,
    }

    impl EmbeddingProvider for Counting {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn batch_limit(&self) -> usize {
            2
        }
        fn max_chars(&self) -> Option<usize> {
            Some(10)
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            self.inner.embed(texts)
        }
    }

    /// Declares one dimension but returns another.
    struct Lying;

    impl EmbeddingProvider for Lying {
        fn id(&self) -> &str {
            "lying"
        }
        fn dimension(&self) -> usize {
            768
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
            Ok(texts.iter().map(|_| vec![1.0; 384]).collect())
        }
    }

    fn naive_cosine(u: &[f32], v: &[f32]) -> f64 {
        let dot: f64 = (0..u.len()).map(|i| u[i] as f64 * v[i] as f64).sum();
        let nu: f64 = (0..u.len()).map(|i| u[i] as f64 * u[i] as f64).sum::<f64>().sqrt();
        let nv: f64 = (0..v.len()).map(|i| v[i] as f64 * v[i] as f64).sum::<f64>().sqrt();
        dot / (nu * nv)
    }

    #[test]
    fn cosine_fixtures() {
        assert_eq!(cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 1 / (1 * sqrt 2)
        let expected = 1.0 / 2f64.sqrt();
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - expected).abs() < 1e-9);
        assert!((expected - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(SimilarityError::ZeroNorm));
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(SimilarityError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn hashed_embedder_is_deterministic_and_normalized() {
        let e = HashedNgramEmbedder::default();
        let a = e.embed_one("تحریم‌ها اقتصاد را نابود کرد");
        assert_eq!(a, e.embed_one("تحریم‌ها اقتصاد را نابود کرد"));
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.len(), 512);
        assert!(e.embed_one("").iter().all(|x| *x == 0.0));
        assert!(e.embed_one("ab").iter().any(|x| *x > 0.0));
    }

    #[test]
    fn hashed_embedder_round_trips_its_id() {
        let e = HashedNgramEmbedder::new(4, 128);
        let back = HashedNgramEmbedder::from_id(e.id()).unwrap();
        assert_eq!(back.id(), e.id());
        assert!(HashedNgramEmbedder::from_id("remote:foo").is_none());
    }

    #[test]
    fn identical_texts_identical_vectors_and_cache_hits() {
        let provider = Arc::new(Counting {
            inner: HashedNgramEmbedder::new(3, 32),
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        });
        let embedder = Embedder::new(provider.clone());
        let texts = vec!["same text".to_string(), "same text".to_string(), "other".to_string()];
        let out = embedder.embed_batch(&texts).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(provider.texts.load(Ordering::SeqCst), 2);

        let calls = provider.calls.load(Ordering::SeqCst);
        embedder.embed_batch(&["other".to_string()]).unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), calls);
    }

    #[test]
    fn long_inputs_are_truncated_before_embedding() {
        let provider = Arc::new(Counting {
            inner: HashedNgramEmbedder::new(3, 32),
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        });
        let embedder = Embedder::new(provider.clone());
        let long = embedder.embed_one("0123456789-suffix").unwrap();
        let short = embedder.embed_one("0123456789").unwrap();
        assert_eq!(long, short);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let embedder = Embedder::new(Arc::new(Lying));
        assert_eq!(
            embedder.embed_batch(&["x".into()]),
            Err(EmbedError::DimensionMismatch { expected: 768, actual: 384 })
        );
    }

    #[test]
    fn empty_batch_is_rejected() {
        let embedder = Embedder::new(Arc::new(HashedNgramEmbedder::default()));
        assert_eq!(embedder.embed_batch(&[]), Err(EmbedError::EmptyBatch));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn vec_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
            (1usize..64)
                .prop_flat_map(|d| (prop::collection::vec(-10.0f32..10.0, d), prop::collection::vec(-10.0f32..10.0, d)))
        }

        proptest! {
            #[test]
            fn matches_naive_oracle((u, v) in vec_pair()) {
                prop_assume!(u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0));
                let got = cosine_similarity(&u, &v).unwrap();
                prop_assert!((got - naive_cosine(&u, &v)).abs() < 1e-9);
            }

            #[test]
            fn symmetric_and_scale_invariant((u, v) in vec_pair(), exp in -8i32..8) {
                // powers of two scale f32 exactly, isolating the function's own error
                let scale = 2f32.powi(exp);
                prop_assume!(u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0));
                let uv = cosine_similarity(&u, &v).unwrap();
                prop_assert!((uv - cosine_similarity(&v, &u).unwrap()).abs() < 1e-9);
                let scaled: Vec<f32> = u.iter().map(|x| x * scale).collect();
                prop_assert!((uv - cosine_similarity(&scaled, &v).unwrap()).abs() < 1e-9);
            }
        }
    }
}
