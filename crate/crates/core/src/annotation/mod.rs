//! Pairwise human annotation: task batches, a durable label store, and the
//! HTTP service the labeling UI talks to.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Question, Record};
use crate::generation::AnswerSet;

mod server;
mod service;
mod store;

pub use server::{router, serve, spawn_background, BackgroundServer};
pub use service::{AnnotationService, NextTask, Progress, ServiceError, SubmitAck};
pub use store::{LabelStore, StoreOutcome};

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const STORE_FILE: &str = "label_store.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Consistent,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub annotator_id: String,
    pub pair_id: String,
    pub label: Label,
    pub labeled_at: DateTime<Utc>,
}

impl Record for LabelRecord {
    fn validate(&self) -> Result<(), String> {
        if self.annotator_id.trim().is_empty() {
            return Err("annotator_id is empty".into());
        }
        if self.pair_id.is_empty() {
            return Err("pair_id is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresentedOrder {
    Ab,
    Ba,
}

/// What an annotator sees. Carries no scores and no model identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub pair_id: String,
    pub question_text: String,
    pub answer_a: String,
    pub answer_b: String,
    pub presented_order: PresentedOrder,
}

/// A task plus the provenance needed to join labels back to questions.
/// Kept server-side only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTask {
    pub pair_id: String,
    pub question_id: String,
    pub i: usize,
    pub j: usize,
    pub paraphrase_a: String,
    pub paraphrase_b: String,
    pub question_text: String,
    pub answer_a: String,
    pub answer_b: String,
    pub presented_order: PresentedOrder,
}

impl Record for PairTask {
    fn validate(&self) -> Result<(), String> {
        if self.i >= self.j {
            return Err(format!("pair indices must satisfy i < j, got ({}, {})", self.i, self.j));
        }
        Ok(())
    }
}

impl PairTask {
    pub fn public(&self) -> AnnotationTask {
        AnnotationTask {
            pair_id: self.pair_id.clone(),
            question_text: self.question_text.clone(),
            answer_a: self.answer_a.clone(),
            answer_b: self.answer_b.clone(),
            presented_order: self.presented_order,
        }
    }
}

pub fn pair_id(question_id: &str, paraphrase_a: &str, paraphrase_b: &str) -> String {
    let mut h = Sha256::new();
    for part in [question_id, paraphrase_a, paraphrase_b] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    format!("pair-{}", &hex::encode(h.finalize())[..16])
}

/// One task per unordered answer pair of each set, in set order then
/// (i, j) order. Display order is drawn from `seed`.
pub fn build_annotation_batch(sets: &[AnswerSet], questions: &[Question], seed: u64) -> Vec<PairTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for set in sets {
        let n = set.n();
        if n < 2 {
            log::warn!("question {} has {n} answer(s); no pairs to annotate", set.question_id);
            continue;
        }
        let question_text = questions
            .iter()
            .find(|q| q.id == set.question_id)
            .map(|q| q.text.clone())
            .unwrap_or_default();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&set.answers[i], &set.answers[j]);
                tasks.push(PairTask {
                    pair_id: pair_id(&set.question_id, &a.paraphrase_id, &b.paraphrase_id),
                    question_id: set.question_id.clone(),
                    i,
                    j,
                    paraphrase_a: a.paraphrase_id.clone(),
                    paraphrase_b: b.paraphrase_id.clone(),
                    question_text: question_text.clone(),
                    answer_a: a.text.clone(),
                    answer_b: b.text.clone(),
                    presented_order: if rng.random_bool(0.5) { PresentedOrder::Ba } else { PresentedOrder::Ab },
                });
            }
        }
    }
    tasks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{Answer, DecodingConfig};

    pub(crate) fn answer_set(qid: &str, n: usize) -> AnswerSet {
        AnswerSet {
            question_id: qid.into(),
            model_tag: "secret-model".into(),
            decoding: DecodingConfig::greedy(),
            answers: (0..n)
                .map(|i| Answer {
                    paraphrase_id: format!("{qid}:p{i}"),
                    text: format!("answer {i} to {qid}"),
                })
                .collect(),
        }
    }

    #[test]
    fn three_answers_make_three_tasks() {
        let tasks = build_annotation_batch(&[answer_set("q", 3)], &[], 1);
        let pairs: Vec<_> = tasks.iter().map(|t| (t.i, t.j)).collect();
        assert_eq!(pairs, [(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn small_sets_are_skipped() {
        assert!(build_annotation_batch(&[answer_set("q", 1), answer_set("r", 0)], &[], 1).is_empty());
    }

    #[test]
    fn count_for_mixed_sizes() {
        // 78 questions with 5 answers, 19 with 4, 3 with 3.
        let mut sets = Vec::new();
        for (n, count) in [(5, 78), (4, 19), (3, 3)] {
            for k in 0..count {
                sets.push(answer_set(&format!("q{n}-{k}"), n));
            }
        }
        assert_eq!(sets.len(), 100);
        let tasks = build_annotation_batch(&sets, &[], 7);
        assert_eq!(tasks.len(), 903);
        let ids: std::collections::HashSet<_> = tasks.iter().map(|t| &t.pair_id).collect();
        assert_eq!(ids.len(), 903);
    }

    #[test]
    fn presented_order_is_seeded() {
        let sets: Vec<_> = (0..10).map(|k| answer_set(&format!("q{k}"), 4)).collect();
        let order = |seed| build_annotation_batch(&sets, &[], seed).iter().map(|t| t.presented_order).collect::<Vec<_>>();
        assert_eq!(order(3), order(3));
        assert_ne!(order(3), order(4));
        assert!(order(3).contains(&PresentedOrder::Ab) && order(3).contains(&PresentedOrder::Ba));
    }

    #[test]
    fn public_task_is_blind() {
        let task = &build_annotation_batch(&[answer_set("q", 2)], &[], 1)[0];
        let json = serde_json::to_string(&task.public()).unwrap();
        assert!(!json.contains("secret-model"));
        assert!(!json.contains("question_id"));
        assert!(!json.contains("q:p0"));
    }
}
