use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use super::{Label, LabelRecord};
use crate::dataset::save_records;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreOutcome {
    Stored,
    /// Same annotator, pair and label as an existing record; nothing written.
    Duplicate,
    /// The annotator already gave this pair a different label.
    Conflict(Label),
}

#[derive(Default)]
struct State {
    labels: Vec<LabelRecord>,
    index: HashMap<(String, String), Label>,
}

impl State {
    fn push(&mut self, rec: LabelRecord) {
        self.index.insert((rec.annotator_id.clone(), rec.pair_id.clone()), rec.label);
        self.labels.push(rec);
    }
}

/// Append-only JSONL label file. Each label is fsynced before `insert`
/// returns; an unterminated final line left by a crash is discarded on open.
pub struct LabelStore {
    path: PathBuf,
    writer: Mutex<File>,
    state: RwLock<State>,
}

impl LabelStore {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
        if complete < bytes.len() {
            log::warn!(
                "{}: discarding {} bytes of unterminated trailing record",
                path.display(),
                bytes.len() - complete
            );
            file.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
            file.sync_all().map_err(|e| Error::io(path, e))?;
        }

        let mut state = State::default();
        let text = String::from_utf8_lossy(&bytes[..complete]);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            if state.index.contains_key(&(rec.annotator_id.clone(), rec.pair_id.clone())) {
                log::warn!("{}:{}: repeated label ignored", path.display(), n + 1);
                continue;
            }
            state.push(rec);
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer: Mutex::new(file),
            state: RwLock::new(state),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn insert(&self, rec: LabelRecord) -> Result<StoreOutcome> {
        let mut file = self.writer.lock().expect("label writer poisoned");
        let key = (rec.annotator_id.clone(), rec.pair_id.clone());
        if let Some(&existing) = self.state.read().expect("label state poisoned").index.get(&key) {
            return Ok(if existing == rec.label {
                StoreOutcome::Duplicate
            } else {
                StoreOutcome::Conflict(existing)
            });
        }
        let mut line = serde_json::to_string(&rec).expect("label serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        self.state.write().expect("label state poisoned").push(rec);
        Ok(StoreOutcome::Stored)
    }

    pub fn label_of(&self, annotator_id: &str, pair_id: &str) -> Option<Label> {
        self.state
            .read()
            .expect("label state poisoned")
            .index
            .get(&(annotator_id.to_owned(), pair_id.to_owned()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("label state poisoned").labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All labels sorted by (pair_id, annotator_id).
    pub fn snapshot(&self) -> Vec<LabelRecord> {
        let mut labels = self.state.read().expect("label state poisoned").labels.clone();
        labels.sort_by(|a, b| (&a.pair_id, &a.annotator_id).cmp(&(&b.pair_id, &b.annotator_id)));
        labels
    }

    pub fn export(&self, path: &Path) -> Result<usize> {
        let labels = self.snapshot();
        save_records(&labels, path)?;
        Ok(labels.len())
    }
}
