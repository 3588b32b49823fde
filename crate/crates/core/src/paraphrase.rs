//! Question paraphrase pipeline: candidate generation and ingestion,
//! classifier scoring, threshold plus top-k filtering, manual review and
//! question-set self-consistency.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agreement::Agreement;
use crate::consistency::pair_matrices;
use crate::dataset::{ParaphraseRecord, ParaphraseSource, ParaphraseStatus, Question, Record};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ScorerEndpoint};
use crate::generation::{render_prompt, trim_at_stop, DecodingConfig, DecodingMode};

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.8;
pub const DEFAULT_TOP_K: usize = 6;
pub const DEFAULT_FEWSHOT_TEMPLATE: &str = include_str!("../templates/fewshot_paraphrase.txt");

/// The unparaphrased question as a record. It is always kept and never
/// filtered.
pub fn original_record(question: &Question) -> ParaphraseRecord {
    ParaphraseRecord {
        id: format!("{}:original", question.id),
        question_id: question.id.clone(),
        text: question.text.clone(),
        source: ParaphraseSource::Original,
        pp_prob: Some(1.0),
        status: ParaphraseStatus::AutoKept,
    }
}

fn candidate_id(question_id: &str, source: ParaphraseSource, index: usize) -> String {
    format!("{question_id}:{}:{index:03}", source.as_str())
}

/// Turns raw candidate texts into records, dropping empties, duplicates of
/// the original question and duplicates of earlier candidates (compared
/// case- and whitespace-insensitively).
fn build_candidates<'a>(
    question: &Question,
    source: ParaphraseSource,
    texts: impl IntoIterator<Item = &'a str>,
) -> Vec<ParaphraseRecord> {
    let key = |t: &str| t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let mut seen: HashSet<String> = HashSet::from([key(&question.text)]);
    let mut out = Vec::new();
    for (i, raw) in texts.into_iter().enumerate() {
        let t = raw.trim();
        if t.is_empty() {
            log::warn!("question {}: empty {} paraphrase #{i} skipped", question.id, source.as_str());
            continue;
        }
        if !seen.insert(key(t)) {
            continue;
        }
        out.push(ParaphraseRecord {
            id: candidate_id(&question.id, source, i),
            question_id: question.id.clone(),
            text: t.to_owned(),
            source,
            pp_prob: None,
            status: ParaphraseStatus::Candidate,
        });
    }
    out
}

fn sample_decoding(base: &DecodingConfig, i: usize) -> DecodingConfig {
    let mut d = base.clone();
    if d.mode == DecodingMode::Nucleus {
        d.seed = Some(base.seed.unwrap_or(0).wrapping_add(i as u64));
    }
    d
}

/// Few-shot LLM paraphrases for many questions: `k` samples per question,
/// sample `i` decoded with seed `decoding.seed + i`.
pub fn generate_candidates(
    gateway: &Gateway,
    questions: &[Question],
    endpoint: &ScorerEndpoint,
    k: usize,
    template: &str,
    decoding: &DecodingConfig,
) -> Result<Vec<ParaphraseRecord>> {
    if k == 0 {
        return Err(Error::Precondition("paraphrases per method must be at least 1".into()));
    }
    if !template.contains("{question}") {
        return Err(Error::Precondition("paraphrase template has no {question} slot".into()));
    }
    let prompts: Vec<String> = questions.iter().map(|q| render_prompt(template, &q.text)).collect();
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    // One batch per sample index; each batch fans out inside the gateway.
    let mut outputs: Vec<Vec<String>> = vec![Vec::with_capacity(k); questions.len()];
    for i in 0..k {
        let results = gateway.complete_batch(endpoint, &refs, &sample_decoding(decoding, i));
        for (slot, r) in outputs.iter_mut().zip(results) {
            slot.push(trim_at_stop(&r?, &decoding.stop_sequences));
        }
    }
    Ok(questions
        .iter()
        .zip(&outputs)
        .flat_map(|(q, texts)| build_candidates(q, ParaphraseSource::FewshotLlm, texts.iter().map(String::as_str)))
        .collect())
}

pub fn generate_paraphrases(
    gateway: &Gateway,
    question: &Question,
    endpoint: &ScorerEndpoint,
    k: usize,
    template: &str,
    decoding: &DecodingConfig,
) -> Result<Vec<ParaphraseRecord>> {
    generate_candidates(gateway, std::slice::from_ref(question), endpoint, k, template, decoding)
}

/// A paraphrase produced by an external generator, one per line of an
/// ingestion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalParaphrase {
    pub question_id: String,
    pub text: String,
    pub source: ParaphraseSource,
}

impl Record for ExternalParaphrase {}

pub fn ingest_candidates(questions: &[Question], external: &[ExternalParaphrase]) -> Result<Vec<ParaphraseRecord>> {
    let mut grouped: HashMap<&str, BTreeMap<ParaphraseSource, Vec<&str>>> = HashMap::new();
    let ids: HashSet<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    for e in external {
        if !ids.contains(e.question_id.as_str()) {
            return Err(Error::Validation(format!("external paraphrase for unknown question {:?}", e.question_id)));
        }
        if e.source == ParaphraseSource::Original {
            return Err(Error::Validation("external paraphrases cannot use source `original`".into()));
        }
        grouped
            .entry(e.question_id.as_str())
            .or_default()
            .entry(e.source)
            .or_default()
            .push(&e.text);
    }
    let mut out = Vec::new();
    for q in questions {
        for (source, texts) in grouped.get(q.id.as_str()).into_iter().flatten() {
            out.extend(build_candidates(q, *source, texts.iter().copied()));
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct ScoreOutcome {
    pub records: Vec<ParaphraseRecord>,
    /// One message per failed record; those records stay unscored.
    pub failures: Vec<String>,
}

/// Sets `pp_prob` = P(candidate paraphrases its question) on every
/// non-original record.
pub fn score_candidates(
    gateway: &Gateway,
    records: &[ParaphraseRecord],
    questions: &[Question],
    endpoint: &ScorerEndpoint,
) -> Result<ScoreOutcome> {
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut targets = Vec::new();
    for (idx, r) in records.iter().enumerate() {
        let q = by_id
            .get(r.question_id.as_str())
            .ok_or_else(|| Error::Precondition(format!("record {} references unknown question {}", r.id, r.question_id)))?;
        if !r.is_original() {
            targets.push((idx, q.text.as_str(), r.text.as_str()));
        }
    }
    let pairs: Vec<(&str, &str)> = targets.iter().map(|(_, a, b)| (*a, *b)).collect();
    let results = gateway.classify_paraphrase_partial(endpoint, &pairs);

    let mut out = ScoreOutcome {
        records: records.to_vec(),
        failures: Vec::new(),
    };
    for ((idx, _, _), res) in targets.iter().zip(results) {
        match res {
            Ok(p) => out.records[*idx].pp_prob = Some(p),
            Err(e) => out.failures.push(format!("{}: {e}", records[*idx].id)),
        }
    }
    Ok(out)
}

/// Per question: candidates below `threshold` are dropped, then the `top_k`
/// highest-probability survivors are kept (ties by ascending id) and the
/// rest dropped. Originals are always kept; human-reviewed records are left
/// untouched.
pub fn filter_paraphrases(records: &[ParaphraseRecord], threshold: f64, top_k: usize) -> Result<Vec<ParaphraseRecord>> {
    let mut out = records.to_vec();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, r) in records.iter().enumerate() {
        if r.is_original() {
            out[idx].status = ParaphraseStatus::AutoKept;
            out[idx].pp_prob = Some(1.0);
            continue;
        }
        if matches!(r.status, ParaphraseStatus::HumanKept | ParaphraseStatus::HumanDropped) {
            continue;
        }
        if r.pp_prob.is_none() {
            return Err(Error::Precondition(format!("paraphrase {} has not been scored", r.id)));
        }
        groups.entry(r.question_id.as_str()).or_default().push(idx);
    }
    for idxs in groups.values() {
        let mut eligible: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| records[i].pp_prob.unwrap() >= threshold)
            .collect();
        eligible.sort_by(|&a, &b| {
            let (ra, rb) = (&records[a], &records[b]);
            rb.pp_prob
                .unwrap()
                .total_cmp(&ra.pp_prob.unwrap())
                .then_with(|| ra.id.cmp(&rb.id))
        });
        let kept: HashSet<usize> = eligible.into_iter().take(top_k).collect();
        for &i in idxs {
            out[i].status = if kept.contains(&i) {
                ParaphraseStatus::AutoKept
            } else {
                ParaphraseStatus::AutoDropped
            };
        }
    }
    Ok(out)
}

const REVIEW_HEADER: [&str; 4] = ["id", "question_text", "paraphrase_text", "verdict"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        message: e.to_string(),
    }
}

/// Writes the auto-kept, non-original records to a review CSV with a blank
/// verdict column. Returns the row count.
pub fn export_review(records: &[ParaphraseRecord], questions: &[Question], path: &Path) -> Result<usize> {
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(REVIEW_HEADER).map_err(|e| csv_err(path, e))?;
    let mut rows = 0;
    for r in records.iter().filter(|r| r.status == ParaphraseStatus::AutoKept && !r.is_original()) {
        let q = by_id
            .get(r.question_id.as_str())
            .ok_or_else(|| Error::Validation(format!("record {} references unknown question", r.id)))?;
        w.write_record([r.id.as_str(), q.text.as_str(), r.text.as_str(), ""])
            .map_err(|e| csv_err(path, e))?;
        rows += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImportReport {
    pub kept: usize,
    pub dropped: usize,
    /// Questions left with fewer than two kept texts (the original included).
    pub flagged_questions: Vec<String>,
}

pub fn import_review(records: &[ParaphraseRecord], path: &Path) -> Result<(Vec<ParaphraseRecord>, ImportReport)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Validation(format!("{}: missing column {name:?}", path.display())))
    };
    let (c_id, c_verdict) = (col("id")?, col("verdict")?);

    let index: HashMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut out = records.to_vec();
    let mut report = ImportReport::default();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row.get(c_id).unwrap_or_default().trim();
        let verdict = row.get(c_verdict).unwrap_or_default().trim().to_lowercase();
        let &idx = index
            .get(id)
            .ok_or_else(|| Error::Validation(format!("{}:{line}: verdict for unknown record {id:?}", path.display())))?;
        if !seen.insert(id.to_owned()) {
            return Err(Error::Validation(format!("{}:{line}: second verdict for {id:?}", path.display())));
        }
        if records[idx].is_original() {
            return Err(Error::Validation(format!("{}:{line}: {id:?} is the original question", path.display())));
        }
        out[idx].status = match verdict.as_str() {
            "keep" => {
                report.kept += 1;
                ParaphraseStatus::HumanKept
            }
            "drop" => {
                report.dropped += 1;
                ParaphraseStatus::HumanDropped
            }
            other => {
                return Err(Error::Validation(format!(
                    "{}:{line}: verdict {other:?} for {id:?} is not keep or drop",
                    path.display()
                )))
            }
        };
    }

    let mut kept_per_question: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &out {
        let e = kept_per_question.entry(r.question_id.as_str()).or_default();
        *e += usize::from(r.status.is_kept());
    }
    report.flagged_questions = kept_per_question
        .into_iter()
        .filter(|(_, n)| *n < 2)
        .map(|(q, _)| q.to_owned())
        .collect();
    Ok((out, report))
}

/// Consistency of a question's own paraphrase set under `f`.
pub fn question_set_consistency(texts: &[&str], f: &dyn Agreement) -> Result<f64> {
    if texts.len() < 2 {
        return Err(Error::UndefinedConsistency { n: texts.len() });
    }
    pair_matrices(&[texts.to_vec()], f)?
        .pop()
        .expect("one matrix")
        .consistency()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSetSummary {
    /// Mean over questions, all candidates plus the original.
    pub unfiltered: Option<f64>,
    pub unfiltered_questions: usize,
    /// Mean over questions, kept records only.
    pub filtered: Option<f64>,
    pub filtered_questions: usize,
    pub agreement: String,
}

fn corpus_mean(groups: &BTreeMap<&str, Vec<&str>>, f: &dyn Agreement) -> Result<(Option<f64>, usize)> {
    let sets: Vec<Vec<&str>> = groups.values().filter(|g| g.len() >= 2).cloned().collect();
    if sets.is_empty() {
        return Ok((None, 0));
    }
    let matrices = pair_matrices(&sets, f)?;
    let scores: Vec<f64> = matrices.iter().map(|m| m.consistency()).collect::<Result<_>>()?;
    Ok((Some(scores.iter().sum::<f64>() / scores.len() as f64), scores.len()))
}

/// Corpus-level question-set consistency before and after filtering.
/// Questions with fewer than two texts are excluded.
pub fn question_set_summary(records: &[ParaphraseRecord], f: &dyn Agreement) -> Result<QuestionSetSummary> {
    let mut all: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut kept: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut sorted: Vec<&ParaphraseRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in sorted {
        all.entry(r.question_id.as_str()).or_default().push(&r.text);
        if r.status.is_kept() {
            kept.entry(r.question_id.as_str()).or_default().push(&r.text);
        }
    }
    let (unfiltered, unfiltered_questions) = corpus_mean(&all, f)?;
    let (filtered, filtered_questions) = corpus_mean(&kept, f)?;
    Ok(QuestionSetSummary {
        unfiltered,
        unfiltered_questions,
        filtered,
        filtered_questions,
        agreement: f.name().to_owned(),
    })
}
