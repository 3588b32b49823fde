//! Content-addressed response cache with an append-only backing file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{EndpointKind, GatewayError};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: Value,
}

/// SHA-256 over kind, model tag and the canonical JSON of one request item.
///
/// `serde_json::Value` objects keep keys sorted, so the serialization is
/// canonical regardless of how the item was built.
pub fn cache_key(kind: EndpointKind, model_tag: &str, item: &Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update([0u8]);
    h.update(model_tag.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(item).expect("json value serializes"));
    hex::encode(h.finalize())
}

pub struct ScoreCache {
    entries: RwLock<HashMap<String, Value>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            file: None,
            path: None,
        }
    }

    /// Opens (creating if needed) a persistent cache. A torn final line from
    /// an interrupted write is skipped.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let cache_err = |e: std::io::Error| GatewayError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(cache_err)?;
        }
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(cache_err)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line.map_err(cache_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.value);
                    }
                    Err(e) => {
                        log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), idx + 1);
                        needs_newline = true;
                    }
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(cache_err)?;
        if needs_newline {
            file.write_all(b"\n").map_err(cache_err)?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.read().expect("cache lock").contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores a batch of entries, appending them to the backing file first.
    pub fn insert_many(&self, items: Vec<(String, Value)>) -> Result<(), GatewayError> {
        if items.is_empty() {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let mut buf = Vec::new();
            for (key, value) in &items {
                serde_json::to_writer(
                    &mut buf,
                    &CacheLine {
                        key: key.clone(),
                        value: value.clone(),
                    },
                )
                .expect("cache line serializes");
                buf.push(b'\n');
            }
            let mut f = file.lock().expect("cache file lock");
            f.write_all(&buf)
                .and_then(|_| f.flush())
                .map_err(|e| GatewayError::Cache(format!("{:?}: {e}", self.path)))?;
        }
        let mut entries = self.entries.write().expect("cache lock");
        entries.extend(items);
        Ok(())
    }
}
