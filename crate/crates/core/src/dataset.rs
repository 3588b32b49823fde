//! Line-delimited JSON persistence for every record type the harness
//! produces or consumes.
//!
//! Each file holds one record per line with snake_case field names. Floats
//! are written with shortest round-trip formatting and parsed back exactly,
//! so a load of a saved file reproduces every value bit-for-bit.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generation::DecodingConfig;

pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const PARAPHRASES_FILE: &str = "paraphrases.jsonl";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const PAIR_SCORES_FILE: &str = "pair_scores.jsonl";
pub const CONSISTENCY_FILE: &str = "consistency.jsonl";
pub const ACCURACY_FILE: &str = "accuracy.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A persisted record. `validate` runs on every line during load.
pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// A source benchmark item with its reference answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub best_answer: String,
    pub true_refs: Vec<String>,
    pub false_refs: Vec<String>,
    pub category: String,
}

impl Question {
    /// Stable identifier derived from the question text, for corpora that
    /// carry no ids of their own.
    pub fn derive_id(text: &str) -> String {
        let digest = Sha256::digest(text.trim().as_bytes());
        format!("q{}", &hex::encode(digest)[..16])
    }
}

impl Record for Question {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("question id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("question {} has empty text", self.id));
        }
        if self.true_refs.is_empty() {
            return Err(format!("question {} has no true references", self.id));
        }
        if self.false_refs.is_empty() {
            return Err(format!("question {} has no false references", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParaphraseSource {
    DocQueryGenerator,
    QualityControlledGenerator,
    FewshotLlm,
    Original,
}

impl ParaphraseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ParaphraseSource::DocQueryGenerator => "doc-query-generator",
            ParaphraseSource::QualityControlledGenerator => "quality-controlled-generator",
            ParaphraseSource::FewshotLlm => "fewshot-llm",
            ParaphraseSource::Original => "original",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaphraseStatus {
    Candidate,
    AutoKept,
    AutoDropped,
    HumanKept,
    HumanDropped,
}

impl ParaphraseStatus {
    pub fn is_kept(self) -> bool {
        matches!(self, ParaphraseStatus::AutoKept | ParaphraseStatus::HumanKept)
    }
}

/// One candidate paraphrase of a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseRecord {
    pub id: String,
    pub question_id: String,
    pub text: String,
    pub source: ParaphraseSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pp_prob: Option<f64>,
    pub status: ParaphraseStatus,
}

impl ParaphraseRecord {
    pub fn is_original(&self) -> bool {
        self.source == ParaphraseSource::Original
    }
}

impl Record for ParaphraseRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("paraphrase id is empty".into());
        }
        match self.pp_prob {
            Some(p) if !(0.0..=1.0).contains(&p) => {
                return Err(format!("paraphrase {}: pp_prob {p} outside [0, 1]", self.id))
            }
            None if self.status != ParaphraseStatus::Candidate => {
                return Err(format!(
                    "paraphrase {}: status {:?} requires pp_prob",
                    self.id, self.status
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Metadata describing one (model, decoding) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub model_tag: String,
    pub decoding: DecodingConfig,
    pub corpus_hash: String,
    pub scorer_versions: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_template: Option<String>,
    /// Answers were generated from every candidate paraphrase rather than
    /// the kept set.
    #[serde(default)]
    pub unfiltered: bool,
    /// Global seed when the answers were generated.
    #[serde(default)]
    pub seed: u64,
    /// Seed of the annotation sample and presentation order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_seed: Option<u64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Loads every record of a JSONL file, validating each line.
pub fn load_records<T: Record>(path: &Path) -> Result<Vec<T>> {
    Ok(load_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`load_records`] but keeps the 1-based line number of each record.
pub fn load_numbered<T: Record>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|msg| {
            Error::Validation(format!("{}:{line_no}: {msg}", path.display()))
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

/// Writes records one per line. The file is replaced atomically.
pub fn save_records<T: Record>(records: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("record serializes");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Loads and validates a question corpus, rejecting duplicate ids.
pub fn load_questions(path: &Path) -> Result<Vec<Question>> {
    let numbered: Vec<(usize, Question)> = load_numbered(path)?;
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (line, q) in &numbered {
        if let Some(first) = seen.insert(q.id.as_str(), *line) {
            return Err(Error::Validation(format!(
                "{}: duplicate question id {:?} on lines {first} and {line}",
                path.display(),
                q.id
            )));
        }
    }
    Ok(numbered.into_iter().map(|(_, q)| q).collect())
}

/// Loads paraphrases and checks every `question_id` resolves.
pub fn load_paraphrases(path: &Path, questions: &[Question]) -> Result<Vec<ParaphraseRecord>> {
    let records: Vec<ParaphraseRecord> = load_records(path)?;
    let ids: std::collections::HashSet<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    for r in &records {
        if !ids.contains(r.question_id.as_str()) {
            return Err(Error::Validation(format!(
                "paraphrase {} references unknown question {:?}",
                r.id, r.question_id
            )));
        }
    }
    Ok(records)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Content hash over parsed records.
///
/// Records are hashed through their canonical serialization, so re-formatting
/// a file leaves the hash unchanged while any field edit changes it.
#[derive(Default)]
pub struct CorpusHasher {
    hasher: Sha256,
}

impl CorpusHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Serialize>(&mut self, section: &str, records: &[T]) -> &mut Self {
        self.hasher.update(section.as_bytes());
        self.hasher.update([0u8]);
        self.hasher.update((records.len() as u64).to_le_bytes());
        for r in records {
            let bytes = serde_json::to_vec(r).expect("record serializes");
            self.hasher.update((bytes.len() as u64).to_le_bytes());
            self.hasher.update(&bytes);
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

pub fn corpus_hash(questions: &[Question], paraphrases: &[ParaphraseRecord]) -> String {
    let mut h = CorpusHasher::new();
    h.add("questions", questions).add("paraphrases", paraphrases);
    h.finish()
}

/// Converts the TruthfulQA CSV release (columns Type, Category, Question,
/// Best Answer, Correct Answers, Incorrect Answers) into questions. Answer
/// lists are `;`-separated. Ids are derived from the question text.
pub fn questions_from_truthfulqa_csv(path: &Path) -> Result<Vec<Question>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Validation(format!("{}: missing column {name:?}", path.display())))
    };
    let (c_cat, c_q, c_best, c_true, c_false) = (
        col("Category")?,
        col("Question")?,
        col("Best Answer")?,
        col("Correct Answers")?,
        col("Incorrect Answers")?,
    );
    let split = |s: &str| -> Vec<String> {
        s.split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect()
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let text = row.get(c_q).unwrap_or_default().trim().to_owned();
        let q = Question {
            id: Question::derive_id(&text),
            best_answer: row.get(c_best).unwrap_or_default().trim().to_owned(),
            true_refs: split(row.get(c_true).unwrap_or_default()),
            false_refs: split(row.get(c_false).unwrap_or_default()),
            category: row.get(c_cat).unwrap_or_default().trim().to_owned(),
            text,
        };
        q.validate().map_err(Error::Validation)?;
        out.push(q);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}
