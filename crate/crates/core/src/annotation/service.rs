use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::{AnnotationTask, Label, LabelRecord, LabelStore, PairTask, StoreOutcome};
use crate::error::Error;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("unknown pair {0:?}")]
    UnknownPair(String),
    #[error("pair {pair_id} already labeled {existing:?} by {annotator_id}")]
    Conflict {
        annotator_id: String,
        pair_id: String,
        existing: Label,
    },
    #[error(transparent)]
    Storage(#[from] Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextTask {
    Task(AnnotationTask),
    Done { done: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SubmitAck {
    Stored,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub labeled_by_annotator: BTreeMap<String, usize>,
}

/// Task queue and label bookkeeping behind the HTTP API. Every annotator
/// walks the batch in the same order.
pub struct AnnotationService {
    tasks: Vec<PairTask>,
    by_id: HashMap<String, usize>,
    /// `None` accepts any annotator id.
    annotators: Option<BTreeSet<String>>,
    store: LabelStore,
    export_path: Option<PathBuf>,
}

impl AnnotationService {
    pub fn new(tasks: Vec<PairTask>, annotators: &[String], store: LabelStore) -> Self {
        let by_id = tasks.iter().enumerate().map(|(i, t)| (t.pair_id.clone(), i)).collect();
        let annotators = (!annotators.is_empty()).then(|| annotators.iter().cloned().collect());
        Self {
            tasks,
            by_id,
            annotators,
            store,
            export_path: None,
        }
    }

    /// Where `GET /api/export` also writes the sorted label file.
    pub fn with_export_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.export_path = Some(path.into());
        self
    }

    pub fn tasks(&self) -> &[PairTask] {
        &self.tasks
    }

    pub fn store(&self) -> &LabelStore {
        &self.store
    }

    fn check_annotator(&self, id: &str) -> Result<(), ServiceError> {
        match &self.annotators {
            Some(set) if !set.contains(id) => Err(ServiceError::UnknownAnnotator(id.to_owned())),
            _ if id.trim().is_empty() => Err(ServiceError::UnknownAnnotator(id.to_owned())),
            _ => Ok(()),
        }
    }

    pub fn next_task(&self, annotator_id: &str) -> Result<NextTask, ServiceError> {
        self.check_annotator(annotator_id)?;
        Ok(self
            .tasks
            .iter()
            .find(|t| self.store.label_of(annotator_id, &t.pair_id).is_none())
            .map_or(NextTask::Done { done: true }, |t| NextTask::Task(t.public())))
    }

    pub fn submit_label(&self, annotator_id: &str, pair_id: &str, label: Label) -> Result<SubmitAck, ServiceError> {
        self.check_annotator(annotator_id)?;
        if !self.by_id.contains_key(pair_id) {
            return Err(ServiceError::UnknownPair(pair_id.to_owned()));
        }
        let rec = LabelRecord {
            annotator_id: annotator_id.to_owned(),
            pair_id: pair_id.to_owned(),
            label,
            labeled_at: Utc::now(),
        };
        match self.store.insert(rec)? {
            StoreOutcome::Stored => Ok(SubmitAck::Stored),
            StoreOutcome::Duplicate => Ok(SubmitAck::Duplicate),
            StoreOutcome::Conflict(existing) => Err(ServiceError::Conflict {
                annotator_id: annotator_id.to_owned(),
                pair_id: pair_id.to_owned(),
                existing,
            }),
        }
    }

    pub fn progress(&self) -> Progress {
        let mut labeled_by_annotator: BTreeMap<String, usize> = self
            .annotators
            .iter()
            .flatten()
            .map(|a| (a.clone(), 0))
            .collect();
        for rec in self.store.snapshot() {
            if self.by_id.contains_key(&rec.pair_id) {
                *labeled_by_annotator.entry(rec.annotator_id).or_default() += 1;
            }
        }
        Progress {
            total: self.tasks.len(),
            labeled_by_annotator,
        }
    }

    /// The sorted label file as JSONL text, also written to the export path
    /// when one is set.
    pub fn export_jsonl(&self) -> Result<String, ServiceError> {
        let labels = self.store.snapshot();
        if let Some(path) = &self.export_path {
            self.store.export(path)?;
        }
        let mut out = String::new();
        for l in &labels {
            out.push_str(&serde_json::to_string(l).expect("label serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn export_labels(&self, path: &Path) -> Result<usize, ServiceError> {
        Ok(self.store.export(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::build_annotation_batch;
    use super::super::tests::answer_set;
    use super::*;

    fn service(dir: &Path, annotators: &[&str]) -> AnnotationService {
        let tasks = build_annotation_batch(&[answer_set("q1", 3), answer_set("q2", 2)], &[], 5);
        let store = LabelStore::open(&dir.join("store.jsonl")).unwrap();
        let names: Vec<String> = annotators.iter().map(|s| s.to_string()).collect();
        AnnotationService::new(tasks, &names, store)
    }

    fn next_id(s: &AnnotationService, who: &str) -> Option<String> {
        match s.next_task(who).unwrap() {
            NextTask::Task(t) => Some(t.pair_id),
            NextTask::Done { .. } => None,
        }
    }

    #[test]
    fn fresh_annotator_gets_first_task_then_done() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), &["ann1"]);
        assert_eq!(next_id(&s, "ann1").as_deref(), Some(s.tasks()[0].pair_id.as_str()));
        for t in s.tasks().to_vec() {
            s.submit_label("ann1", &t.pair_id, Label::Consistent).unwrap();
        }
        assert_eq!(s.next_task("ann1").unwrap(), NextTask::Done { done: true });
        assert_eq!(s.progress().labeled_by_annotator["ann1"], 4);
    }

    #[test]
    fn unknown_annotator_and_pair() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), &["ann1"]);
        assert!(matches!(s.next_task("mallory"), Err(ServiceError::UnknownAnnotator(_))));
        assert!(matches!(s.submit_label("ann1", "pair-nope", Label::Consistent), Err(ServiceError::UnknownPair(_))));
    }

    #[test]
    fn duplicate_and_conflicting_submissions() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), &[]);
        let pid = s.tasks()[0].pair_id.clone();
        assert_eq!(s.submit_label("x", &pid, Label::Inconsistent).unwrap(), SubmitAck::Stored);
        assert_eq!(s.submit_label("x", &pid, Label::Inconsistent).unwrap(), SubmitAck::Duplicate);
        assert!(matches!(s.submit_label("x", &pid, Label::Consistent), Err(ServiceError::Conflict { .. })));
        assert_eq!(s.store().len(), 1);
        assert_eq!(s.progress().labeled_by_annotator["x"], 1);
    }

    #[test]
    fn interleaved_annotators_each_see_every_task_once() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(dir.path(), &["a", "b"]);
        let mut seen: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        let mut active = vec!["a", "b"];
        let mut turn = 0;
        while !active.is_empty() {
            let who = active[turn % active.len()];
            match next_id(&s, who) {
                Some(pid) => {
                    s.submit_label(who, &pid, Label::Consistent).unwrap();
                    seen.entry(who).or_default().push(pid);
                }
                None => active.retain(|w| *w != who),
            }
            turn += 1;
        }
        let all: Vec<String> = s.tasks().iter().map(|t| t.pair_id.clone()).collect();
        assert_eq!(seen["a"], all);
        assert_eq!(seen["b"], all);
        assert_eq!(s.store().len(), 2 * all.len());
    }
}
