use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use exbank_core::text::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::GatewayError;

/// One completed generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub cache_key: String,
    pub model: String,
    pub text: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub request_id: Option<String>,
    pub timestamp: String,
    pub retries: u32,
}

/// Hash of everything that determines a completion.
pub fn cache_key(model: &str, prompt: &str, temperature: f64, max_tokens: u32) -> String {
    let mut material = Vec::with_capacity(model.len() + prompt.len() + 32);
    for part in [model.as_bytes(), prompt.as_bytes(), &temperature.to_bits().to_le_bytes(), &max_tokens.to_le_bytes()] {
        material.extend_from_slice(&(part.len() as u64).to_le_bytes());
        material.extend_from_slice(part);
    }
    sha256_hex(&material)
}

/// Append-only line-delimited generation log indexed in memory.
///
/// The first record for a key wins; later duplicates are ignored on load.
pub struct GenerationCache {
    records: RwLock<HashMap<String, Arc<GenerationRecord>>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl GenerationCache {
    pub fn in_memory() -> Self {
        Self { records: RwLock::new(HashMap::new()), file: None, path: None }
    }

    /// Opens (creating if needed) a cache file. A torn final line from an
    /// interrupted write is skipped with a warning.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let io = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut records = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<GenerationRecord>(&line) {
                    Ok(r) => {
                        records.entry(r.cache_key.clone()).or_insert_with(|| Arc::new(r));
                        needs_newline = false;
                    }
                    Err(e) => {
                        log::warn!("{}: skipping unreadable line {}: {e}", path.display(), n + 1);
                        needs_newline = true;
                    }
                }
            }
            let bytes = std::fs::read(path).map_err(io)?;
            needs_newline |= bytes.last().is_some_and(|b| *b != b'\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if needs_newline {
            file.write_all(b"\n").map_err(io)?;
        }
        Ok(Self { records: RwLock::new(records), file: Some(Mutex::new(file)), path: Some(path.to_path_buf()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Arc<GenerationRecord>> {
        self.records.read().expect("cache lock").get(key).cloned()
    }

    /// Persists `record` unless its key is already present; returns the
    /// stored record either way.
    pub fn insert(&self, record: GenerationRecord) -> Result<Arc<GenerationRecord>, GatewayError> {
        let mut records = self.records.write().expect("cache lock");
        if let Some(existing) = records.get(&record.cache_key) {
            return Ok(existing.clone());
        }
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&record).map_err(|e| GatewayError::Cache(e.to_string()))?;
            line.push('\n');
            let mut file = file.lock().expect("cache file lock");
            file.write_all(line.as_bytes()).map_err(|e| GatewayError::Cache(e.to_string()))?;
            file.flush().map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        let record = Arc::new(record);
        records.insert(record.cache_key.clone(), record.clone());
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: &str, text: &str) -> GenerationRecord {
        GenerationRecord {
            cache_key: key.into(),
            model: "m".into(),
            text: text.into(),
            latency_ms: 1,
            request_id: None,
            timestamp: "t".into(),
            retries: 0,
        }
    }

    #[test]
    fn keys_separate_every_input() {
        let base = cache_key("m", "p", 0.0, 10);
        assert_eq!(base, cache_key("m", "p", 0.0, 10));
        assert_ne!(base, cache_key("m2", "p", 0.0, 10));
        assert_ne!(base, cache_key("m", "p2", 0.0, 10));
        assert_ne!(base, cache_key("m", "p", 0.5, 10));
        assert_ne!(base, cache_key("m", "p", 0.0, 11));
        // length prefixes keep field boundaries unambiguous
        assert_ne!(cache_key("ab", "c", 0.0, 1), cache_key("a", "bc", 0.0, 1));
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.jsonl");
        let cache = GenerationCache::open(&path).unwrap();
        cache.insert(record("k1", "one")).unwrap();
        let kept = cache.insert(record("k1", "other")).unwrap();
        assert_eq!(kept.text, "one");
        drop(cache);

        // simulate a write torn by an interruption
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"cache_key\":\"k2\",\"mod").unwrap();
        drop(f);

        let cache = GenerationCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        cache.insert(record("k3", "three")).unwrap();
        drop(cache);
        let cache = GenerationCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get("k3").unwrap().text, "three");
    }
}
