//! Append-only embedding cache.
//!
//! On disk each entry is one JSON line
//! `{"input_digest", "model_id", "dim", "values_b64"}` with the values stored
//! as little-endian f32, base64 encoded. A torn final line (a crash during
//! append) is dropped on load; damage anywhere else is an error.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vector::{decode_values_b64, encode_values_b64};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("embedding cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("embedding cache {path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CacheRecord {
    pub input_digest: String,
    pub model_id: String,
    pub dim: usize,
    pub values_b64: String,
}

type Key = (String, String);

pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<Key, Arc<[f32]>>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists and opens it for appending.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io_err = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        let mut truncate_to = None;
        if path.exists() {
            let raw = std::fs::read(path).map_err(io_err)?;
            needs_newline = !raw.is_empty() && !raw.ends_with(b"\n");
            let lines: Vec<&[u8]> = raw.split(|b| *b == b'\n').collect();
            let last_nonempty = lines.iter().rposition(|l| !l.is_empty());
            for (idx, line) in lines.iter().enumerate() {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match parse_record(line) {
                    Ok((key, values)) => {
                        entries.insert(key, values);
                    }
                    Err(_) if Some(idx) == last_nonempty && needs_newline => {
                        log::warn!("{}: dropping torn final cache line", path.display());
                        truncate_to = Some(raw.len() - line.len());
                        needs_newline = false;
                    }
                    Err(message) => {
                        return Err(CacheError::Corrupt {
                            path: path.to_path_buf(),
                            line: idx + 1,
                            message,
                        })
                    }
                }
            }
        }
        if let Some(len) = truncate_to {
            OpenOptions::new()
                .write(true)
                .open(path)
                .and_then(|f| f.set_len(len as u64))
                .map_err(io_err)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        let mut writer = BufWriter::new(file);
        if needs_newline {
            writer.write_all(b"\n").map_err(io_err)?;
            writer.flush().map_err(io_err)?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(writer)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model_id: &str, input_digest: &str) -> Option<Arc<[f32]>> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&(model_id.to_string(), input_digest.to_string()))
            .cloned()
    }

    /// Stores an entry unless one already exists for the key; returns the
    /// stored values either way.
    pub fn insert(&self, model_id: &str, input_digest: &str, values: Arc<[f32]>) -> Result<Arc<[f32]>, CacheError> {
        let key = (model_id.to_string(), input_digest.to_string());
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        if let Some(existing) = self.entries.read().expect("cache lock poisoned").get(&key) {
            return Ok(existing.clone());
        }
        if let Some(w) = writer.as_mut() {
            let record = CacheRecord {
                input_digest: input_digest.to_string(),
                model_id: model_id.to_string(),
                dim: values.len(),
                values_b64: encode_values_b64(&values),
            };
            let line = serde_json::to_string(&record).expect("cache record serializes");
            let path = self.path.clone().unwrap_or_default();
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
                .map_err(|source| CacheError::Io { path, source })?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(key, values.clone());
        Ok(values)
    }
}

fn parse_record(line: &[u8]) -> Result<(Key, Arc<[f32]>), String> {
    let record: CacheRecord = serde_json::from_slice(line).map_err(|e| e.to_string())?;
    let values = decode_values_b64(&record.values_b64)?;
    if values.len() != record.dim {
        return Err(format!("dim {} but {} values", record.dim, values.len()));
    }
    Ok(((record.model_id, record.input_digest), values.into()))
}

/// Reads every record of a cache file, in file order.
pub fn read_cache_records(path: &Path) -> Result<Vec<CacheRecord>, CacheError> {
    let file = File::open(path).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CacheError::Corrupt {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_and_reloads_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let values: Arc<[f32]> = vec![0.6f32, -0.8, f32::MIN_POSITIVE].into();
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert("m", "d1", values.clone()).unwrap();
            cache.insert("m", "d1", vec![1.0f32].into()).unwrap();
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(&*cache.get("m", "d1").unwrap(), &*values);
        assert!(cache.get("other-model", "d1").is_none());
        let records = read_cache_records(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].dim, 3);
    }

    #[test]
    fn torn_tail_is_ignored_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert("m", "d1", vec![1.0f32, 0.0].into()).unwrap();
        }
        let mut raw = std::fs::read(&path).unwrap();
        raw.extend_from_slice(b"{\"input_digest\":\"d2\",\"mod");
        std::fs::write(&path, &raw).unwrap();
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            assert_eq!(cache.len(), 1);
            cache.insert("m", "d3", vec![0.0f32, 1.0].into()).unwrap();
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn damaged_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, b"not json\n{}\n").unwrap();
        match EmbeddingCache::open(&path) {
            Err(CacheError::Corrupt { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected corruption error, got {:?}", other.err()),
        }
    }
}
