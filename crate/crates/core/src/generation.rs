//! Answer-set generation: every kept paraphrase of every question is sent to
//! a text-generation endpoint under one decoding configuration.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ParaphraseRecord, Question, Record};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, ScorerEndpoint};

pub const DEFAULT_ANSWER_TEMPLATE: &str = "Q: {question}\nA:";
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    Greedy,
    Nucleus,
}

impl DecodingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodingMode::Greedy => "greedy",
            DecodingMode::Nucleus => "nucleus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub mode: DecodingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl DecodingConfig {
    pub fn greedy() -> Self {
        Self {
            mode: DecodingMode::Greedy,
            top_p: None,
            temperature: 0.0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: None,
            stop_sequences: vec!["\n".into()],
        }
    }

    pub fn nucleus(top_p: f64, seed: u64) -> Self {
        Self {
            mode: DecodingMode::Nucleus,
            top_p: Some(top_p),
            temperature: DEFAULT_TEMPERATURE,
            seed: Some(seed),
            ..Self::greedy()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature {} must be finite and >= 0", self.temperature));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        if self.mode == DecodingMode::Nucleus {
            match self.top_p {
                Some(p) if p > 0.0 && p <= 1.0 => {}
                Some(p) => return Err(format!("top_p {p} outside (0, 1]")),
                None => return Err("nucleus decoding requires top_p".into()),
            }
            if self.seed.is_none() {
                return Err("nucleus decoding requires a seed".into());
            }
        }
        Ok(())
    }

    /// The form sent upstream: fields greedy decoding ignores are cleared so
    /// they cannot perturb the request or its cache key.
    pub fn canonical(&self) -> Self {
        match self.mode {
            DecodingMode::Greedy => Self {
                top_p: None,
                seed: None,
                temperature: 0.0,
                ..self.clone()
            },
            DecodingMode::Nucleus => self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub paraphrase_id: String,
    pub text: String,
}

/// The generated answers for one question's kept paraphrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub question_id: String,
    pub model_tag: String,
    pub decoding: DecodingConfig,
    pub answers: Vec<Answer>,
}

impl AnswerSet {
    pub fn texts(&self) -> Vec<&str> {
        self.answers.iter().map(|a| a.text.as_str()).collect()
    }

    pub fn n(&self) -> usize {
        self.answers.len()
    }
}

impl Record for AnswerSet {
    fn validate(&self) -> std::result::Result<(), String> {
        self.decoding
            .validate()
            .map_err(|m| format!("answer set {}: {m}", self.question_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub question_id: String,
    pub paraphrase_id: String,
    pub error: String,
}

impl Record for GenerationFailure {}

#[derive(Debug, Default)]
pub struct GenerationOutcome {
    /// Complete answer sets, in corpus order.
    pub sets: Vec<AnswerSet>,
    /// Items whose generation failed; their questions are absent from `sets`.
    pub failures: Vec<GenerationFailure>,
}

/// Cuts `text` at the earliest stop sequence and trims surrounding whitespace.
pub fn trim_at_stop(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].trim().to_owned()
}

pub fn render_prompt(template: &str, question: &str) -> String {
    template.replace("{question}", question)
}

/// Kept paraphrases grouped per question, each group sorted by paraphrase id.
pub fn kept_by_question(paraphrases: &[ParaphraseRecord]) -> BTreeMap<&str, Vec<&ParaphraseRecord>> {
    let mut map: BTreeMap<&str, Vec<&ParaphraseRecord>> = BTreeMap::new();
    for p in paraphrases.iter().filter(|p| p.status.is_kept()) {
        map.entry(p.question_id.as_str()).or_default().push(p);
    }
    for group in map.values_mut() {
        group.sort_by(|a, b| a.id.cmp(&b.id));
    }
    map
}

pub fn generate_answer_sets(
    gateway: &Gateway,
    questions: &[Question],
    paraphrases: &[ParaphraseRecord],
    endpoint: &ScorerEndpoint,
    decoding: &DecodingConfig,
    template: &str,
) -> Result<GenerationOutcome> {
    if !template.contains("{question}") {
        return Err(Error::Precondition("answer template has no {question} slot".into()));
    }
    decoding.validate().map_err(Error::Config)?;

    let kept = kept_by_question(paraphrases);
    let mut plan: Vec<(&Question, Vec<&ParaphraseRecord>)> = Vec::new();
    for q in questions {
        match kept.get(q.id.as_str()) {
            Some(group) => plan.push((q, group.clone())),
            None => log::warn!("question {} has no kept paraphrases; skipped", q.id),
        }
    }

    let prompts: Vec<String> = plan
        .iter()
        .flat_map(|(_, group)| group.iter().map(|p| render_prompt(template, &p.text)))
        .collect();
    let prompt_refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let mut results = gateway
        .complete_batch(endpoint, &prompt_refs, decoding)
        .into_iter();

    let mut outcome = GenerationOutcome::default();
    for (q, group) in plan {
        let mut answers = Vec::with_capacity(group.len());
        let mut failed = false;
        for p in group {
            match results.next().expect("one result per prompt") {
                Ok(raw) => answers.push(Answer {
                    paraphrase_id: p.id.clone(),
                    text: trim_at_stop(&raw, &decoding.stop_sequences),
                }),
                Err(e) => {
                    failed = true;
                    outcome.failures.push(GenerationFailure {
                        question_id: q.id.clone(),
                        paraphrase_id: p.id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if !failed {
            outcome.sets.push(AnswerSet {
                question_id: q.id.clone(),
                model_tag: endpoint.model_tag.clone(),
                decoding: decoding.clone(),
                answers,
            });
        }
    }
    Ok(outcome)
}

/// Deterministic random subset of `n` questions, returned in corpus order.
pub fn sample_questions(questions: &[Question], n: usize, seed: u64) -> Result<Vec<Question>> {
    if n > questions.len() {
        return Err(Error::Precondition(format!(
            "cannot sample {n} questions from {}",
            questions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, questions.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| questions[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dataset::{ParaphraseSource, ParaphraseStatus};
    use crate::gateway::{EndpointKind, MockServer, ScoreCache};

    fn question(id: &str) -> Question {
        Question {
            id: id.into(),
            text: format!("What is {id}?"),
            best_answer: "x".into(),
            true_refs: vec!["x".into()],
            false_refs: vec!["y".into()],
            category: "c".into(),
        }
    }

    fn para(id: &str, qid: &str, text: &str, status: ParaphraseStatus) -> ParaphraseRecord {
        ParaphraseRecord {
            id: id.into(),
            question_id: qid.into(),
            text: text.into(),
            source: ParaphraseSource::FewshotLlm,
            pp_prob: Some(0.9),
            status,
        }
    }

    fn mock_gateway() -> Gateway {
        let fixtures = serde_json::json!({"generate": [
            {"prompt": "Q: one?\nA:", "output": " First.\nQ: more"},
            {"prompt": "Q: two?\nA:", "output": " Second."},
            {"prompt": "Q: three?\nA:", "output": "\n"},
            {"prompt": "Q: one?\nA:", "seed": 7, "output": " Sampled first."},
            {"prompt": "Q: two?\nA:", "seed": 7, "output": " Sampled second."},
            {"prompt": "Q: three?\nA:", "seed": 7, "output": " Sampled third."},
        ]});
        let server = MockServer::new(serde_json::from_value(fixtures).unwrap());
        Gateway::new(Arc::new(server), ScoreCache::in_memory())
    }

    fn setup() -> (Vec<Question>, Vec<ParaphraseRecord>) {
        let qs = vec![question("q1"), question("q2")];
        let ps = vec![
            para("p3", "q1", "three?", ParaphraseStatus::HumanKept),
            para("p1", "q1", "one?", ParaphraseStatus::AutoKept),
            para("p2", "q1", "two?", ParaphraseStatus::AutoKept),
            para("p4", "q1", "dropped?", ParaphraseStatus::AutoDropped),
        ];
        (qs, ps)
    }

    fn gen_ep() -> ScorerEndpoint {
        ScorerEndpoint::new("gen", EndpointKind::TextGeneration, "mock:", "opt-test")
    }

    #[test]
    fn one_answer_per_kept_paraphrase_in_id_order() {
        let (qs, ps) = setup();
        let gw = mock_gateway();
        let out = generate_answer_sets(&gw, &qs, &ps, &gen_ep(), &DecodingConfig::greedy(), DEFAULT_ANSWER_TEMPLATE).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.sets.len(), 1);
        let set = &out.sets[0];
        assert_eq!(set.n(), 3);
        let ids: Vec<_> = set.answers.iter().map(|a| a.paraphrase_id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2", "p3"]);
        assert_eq!(set.texts(), ["First.", "Second.", ""]);
    }

    #[test]
    fn nucleus_is_reproducible_and_differs_from_greedy() {
        let (qs, ps) = setup();
        let gw = mock_gateway();
        let nucleus = DecodingConfig::nucleus(0.9, 7);
        let a = generate_answer_sets(&gw, &qs, &ps, &gen_ep(), &nucleus, DEFAULT_ANSWER_TEMPLATE).unwrap();
        let b = generate_answer_sets(&mock_gateway(), &qs, &ps, &gen_ep(), &nucleus, DEFAULT_ANSWER_TEMPLATE).unwrap();
        let g = generate_answer_sets(&gw, &qs, &ps, &gen_ep(), &DecodingConfig::greedy(), DEFAULT_ANSWER_TEMPLATE).unwrap();
        assert_eq!(a.sets, b.sets);
        assert_ne!(a.sets[0].texts(), g.sets[0].texts());
    }

    #[test]
    fn failures_are_recorded_per_item() {
        let (qs, mut ps) = setup();
        ps.push(para("p9", "q2", "unknown?", ParaphraseStatus::AutoKept));
        let gw = mock_gateway();
        // A rejected request fails every item in its batch.
        let ep = gen_ep().with_max_batch(1);
        let out = generate_answer_sets(&gw, &qs, &ps, &ep, &DecodingConfig::greedy(), DEFAULT_ANSWER_TEMPLATE).unwrap();
        assert_eq!(out.sets.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].paraphrase_id, "p9");
    }

    #[test]
    fn template_needs_slot() {
        let (qs, ps) = setup();
        let err = generate_answer_sets(&mock_gateway(), &qs, &ps, &gen_ep(), &DecodingConfig::greedy(), "Answer:");
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn stop_sequence_trimming() {
        let stops = vec!["\n".to_string(), "Q:".to_string()];
        assert_eq!(trim_at_stop(" Paris. Q: next\nmore", &stops), "Paris.");
        assert_eq!(trim_at_stop("\nanything", &stops), "");
        assert_eq!(trim_at_stop("  no stop  ", &[]), "no stop");
    }

    #[test]
    fn decoding_validation() {
        assert!(DecodingConfig::greedy().validate().is_ok());
        assert!(DecodingConfig::nucleus(0.9, 1).validate().is_ok());
        assert!(DecodingConfig::nucleus(0.0, 1).validate().is_err());
        assert!(DecodingConfig::nucleus(1.2, 1).validate().is_err());
        let mut d = DecodingConfig::nucleus(0.9, 1);
        d.seed = None;
        assert!(d.validate().is_err());
        let mut g = DecodingConfig::greedy();
        g.top_p = Some(0.3);
        g.seed = Some(5);
        assert_eq!(g.canonical(), DecodingConfig::greedy());
    }

    #[test]
    fn sampling() {
        let qs: Vec<Question> = (0..817).map(|i| question(&format!("q{i:03}"))).collect();
        assert_eq!(sample_questions(&qs, 817, 1).unwrap(), qs);
        let a = sample_questions(&qs, 100, 42).unwrap();
        assert_eq!(a, sample_questions(&qs, 100, 42).unwrap());
        assert_eq!(a.len(), 100);
        assert_ne!(a, sample_questions(&qs, 100, 43).unwrap());
        assert!(sample_questions(&qs, 818, 1).is_err());
    }
}
