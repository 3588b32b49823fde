//! Corpus-scale paraphrase counts: 817 questions, 8,956 candidates from
//! three methods, 3,962 kept after top-6 filtering and manual review.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use concord::dataset::{ParaphraseSource, ParaphraseStatus, Question};
use concord::gateway::{EndpointKind, Gateway, MockFixtures, MockServer, ScoreCache, ScorerEndpoint};
use concord::generation::DecodingConfig;
use concord::paraphrase::{self, ExternalParaphrase};
use serde_json::json;

const QUESTIONS: usize = 817;
const TEMPLATE: &str = "Rewrite: {question}\nParaphrase:";
const SEED: u64 = 100;

fn question(i: usize) -> Question {
    Question {
        id: format!("q{i:03}"),
        text: format!("What is fact number {i}?"),
        best_answer: "x".into(),
        true_refs: vec!["x".into()],
        false_refs: vec!["y".into()],
        category: "Synthetic".into(),
    }
}

/// Every 27th question's first few-shot sample repeats the question.
fn echoes_original(i: usize) -> bool {
    i.is_multiple_of(27) && i < 27 * 31
}

fn fewshot_text(i: usize, s: usize) -> String {
    if s == 0 && echoes_original(i) {
        format!("  what is FACT number {i}?  ")
    } else {
        format!("Could you tell me fact {i}, variant f{s}?")
    }
}

fn corpus() -> (Vec<Question>, Vec<ExternalParaphrase>, MockFixtures) {
    let qs: Vec<Question> = (0..QUESTIONS).map(question).collect();
    let mut external = Vec::new();
    let mut generate = Vec::new();
    for (i, q) in qs.iter().enumerate() {
        for (tag, source) in [("d", ParaphraseSource::DocQueryGenerator), ("c", ParaphraseSource::QualityControlledGenerator)] {
            for s in 0..4 {
                external.push(ExternalParaphrase {
                    question_id: q.id.clone(),
                    text: format!("Tell me fact {i}, variant {tag}{s}."),
                    source,
                });
            }
        }
        for s in 0..3 {
            generate.push(json!({
                "prompt": TEMPLATE.replace("{question}", &q.text),
                "seed": SEED + s as u64,
                "output": format!(" {}\nRewrite: ignored", fewshot_text(i, s)),
            }));
        }
    }
    let fixtures: MockFixtures = serde_json::from_value(json!({ "generate": generate })).unwrap();
    (qs, external, fixtures)
}

/// Classifier probabilities: the first six candidates of each question pass,
/// everything after scores 0.4.
fn prob_table(qs: &[Question], records: &[concord::dataset::ParaphraseRecord]) -> MockFixtures {
    let text: HashMap<&str, &str> = qs.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
    let mut rank: HashMap<&str, usize> = HashMap::new();
    let mut table = Vec::new();
    for r in records.iter().filter(|r| !r.is_original()) {
        let k = rank.entry(r.question_id.as_str()).or_default();
        let p = if *k < 6 { 0.95 - 0.01 * *k as f64 } else { 0.4 };
        *k += 1;
        table.push(json!({"a": text[r.question_id.as_str()], "b": r.text, "value": p}));
    }
    serde_json::from_value(json!({ "paraphrase": table })).unwrap()
}

#[test]
fn candidate_and_kept_counts() {
    let (qs, external, gen_fixtures) = corpus();

    let gen_gw = Gateway::new(Arc::new(MockServer::new(gen_fixtures)), ScoreCache::in_memory());
    let gen_ep = ScorerEndpoint::new("gen", EndpointKind::TextGeneration, "mock:", "fewshot");
    let decoding = DecodingConfig::nucleus(0.9, SEED);
    let mut records: Vec<_> = qs.iter().map(paraphrase::original_record).collect();
    records.extend(paraphrase::ingest_candidates(&qs, &external).unwrap());
    records.extend(paraphrase::generate_candidates(&gen_gw, &qs, &gen_ep, 3, TEMPLATE, &decoding).unwrap());

    let candidates: Vec<_> = records.iter().filter(|r| !r.is_original()).collect();
    assert_eq!(candidates.len(), 8_956);
    let sources: BTreeSet<_> = candidates.iter().map(|r| r.source).collect();
    assert_eq!(sources.len(), 3);

    let pp_gw = Gateway::new(Arc::new(MockServer::new(prob_table(&qs, &records))), ScoreCache::in_memory());
    let pp_ep = ScorerEndpoint::new("pp", EndpointKind::Paraphrase, "mock:", "fixture-pp");
    let scored = paraphrase::score_candidates(&pp_gw, &records, &qs, &pp_ep).unwrap();
    assert!(scored.failures.is_empty());
    let filtered = paraphrase::filter_paraphrases(&scored.records, 0.8, 6).unwrap();
    let auto_kept = filtered.iter().filter(|r| !r.is_original() && r.status == ParaphraseStatus::AutoKept).count();
    assert_eq!(auto_kept, QUESTIONS * 6);

    // Reviewers drop the sixth kept paraphrase everywhere and the fifth for
    // the last 123 questions.
    let dir = tempfile::tempdir().unwrap();
    let review = dir.path().join("review.csv");
    assert_eq!(paraphrase::export_review(&filtered, &qs, &review).unwrap(), QUESTIONS * 6);
    let mut rdr = csv::Reader::from_path(&review).unwrap();
    let mut w = csv::Writer::from_path(dir.path().join("verdicts.csv")).unwrap();
    w.write_record(["id", "question_text", "paraphrase_text", "verdict"]).unwrap();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let prob: HashMap<&str, f64> = filtered.iter().map(|r| (r.id.as_str(), r.pp_prob.unwrap())).collect();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let mut order: Vec<&csv::StringRecord> = rows.iter().collect();
    order.sort_by(|a, b| prob[&b[0]].total_cmp(&prob[&a[0]]).then_with(|| a[0].cmp(&b[0])));
    for row in order {
        let qid = row[0].split(':').next().unwrap().to_owned();
        let qnum: usize = qid[1..].parse().unwrap();
        let slot = seen.entry(qid).or_default();
        let drop = *slot == 5 || (*slot == 4 && qnum >= QUESTIONS - 123);
        *slot += 1;
        w.write_record([&row[0], &row[1], &row[2], if drop { "drop" } else { "keep" }]).unwrap();
    }
    w.flush().unwrap();
    drop(w);

    let (reviewed, report) = paraphrase::import_review(&filtered, &dir.path().join("verdicts.csv")).unwrap();
    assert_eq!(report.dropped, 940);
    assert!(report.flagged_questions.is_empty());
    let kept: Vec<_> = reviewed.iter().filter(|r| !r.is_original() && r.status.is_kept()).collect();
    assert_eq!(kept.len(), 3_962);
    let covered: BTreeSet<&str> = kept.iter().map(|r| r.question_id.as_str()).collect();
    assert_eq!(covered.len(), 817);
}
