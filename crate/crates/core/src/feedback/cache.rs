//! Persistent memo of generation outputs keyed by provider and prompt.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of the provider id and the full prompt.
pub fn prompt_key(provider_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(provider_id.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the cache file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub output: String,
    pub score: f64,
}

/// Thread-safe cache, optionally mirrored to an append-only JSONL file.
#[derive(Debug, Default)]
pub struct FeedbackCache {
    entries: Mutex<HashMap<String, CacheEntry>>,
    file: Mutex<Option<File>>,
    path: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl FeedbackCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing entries from `path` (if present) and appends new ones.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("feedback cache {}: {e}", path.display()),
                })?;
                entries.insert(e.prompt_hash.clone(), e);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FeedbackCache {
            entries: Mutex::new(entries),
            file: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
            ..Default::default()
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let found = self.entries.lock().expect("cache lock").get(key).cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<()> {
        let mut file = self.file.lock().expect("cache file lock");
        if let Some(f) = file.as_mut() {
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
        }
        self.entries
            .lock()
            .expect("cache lock")
            .insert(entry.prompt_hash.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}
