//! Deterministic in-process scorers implementing the gateway wire protocol.
//!
//! Explicit fixtures take precedence; anything not covered falls back to a
//! lexical computation:
//!
//! * `/score` and `/paraphrase`: unigram Jaccard of the two texts.
//! * `/nli`: Jaccard overlap `j` of the non-negation tokens. When exactly one
//!   side contains a negation word the verdict is `(0, 1-j, j)`, otherwise
//!   `(j, 1-j, 0)`.
//! * `/ner`: maximal runs of capitalized words plus numerals.
//! * `/generate`: no fallback; unknown prompts are rejected with HTTP 404.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};

use super::transport::{Transport, TransportError};
use super::ScorerEndpoint;
use crate::text;

#[derive(Debug, Clone, Deserialize)]
pub struct PairFixture {
    pub a: String,
    pub b: String,
    pub value: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NliFixture {
    pub premise: String,
    pub hypothesis: String,
    pub probs: [f64; 3],
}

#[derive(Debug, Clone, Deserialize)]
pub struct NerFixture {
    pub text: String,
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct GenerateFixture {
    pub prompt: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub output: String,
}

/// Fixture file contents. Every table is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct MockFixtures {
    pub score: Vec<PairFixture>,
    pub paraphrase: Vec<PairFixture>,
    pub nli: Vec<NliFixture>,
    pub ner: Vec<NerFixture>,
    pub generate: Vec<GenerateFixture>,
    /// Reject nucleus decoding requests with HTTP 422.
    pub refuse_nucleus: bool,
}

pub struct MockServer {
    score: HashMap<(String, String), f64>,
    paraphrase: HashMap<(String, String), f64>,
    nli: HashMap<(String, String), [f64; 3]>,
    ner: HashMap<String, Vec<String>>,
    generate: HashMap<(String, Option<u64>), String>,
    refuse_nucleus: bool,
}

const NEGATIONS: &[&str] = &["not", "no", "never", "nothing", "none", "nobody", "cannot", "t"];

const SENTENCE_STARTERS: &[&str] = &[
    "A", "An", "The", "It", "In", "On", "At", "If", "What", "Who", "Which", "When", "Where", "Why",
    "How", "Is", "Are", "Do", "Does", "Can", "You", "I", "We", "They", "He", "She", "There", "This",
    "That", "Yes", "No", "Nothing", "Some", "Most", "All",
];

impl MockServer {
    pub fn new(fixtures: MockFixtures) -> Self {
        let pair_map = |v: Vec<PairFixture>| v.into_iter().map(|f| ((f.a, f.b), f.value)).collect();
        Self {
            score: pair_map(fixtures.score),
            paraphrase: pair_map(fixtures.paraphrase),
            nli: fixtures
                .nli
                .into_iter()
                .map(|f| ((f.premise, f.hypothesis), f.probs))
                .collect(),
            ner: fixtures.ner.into_iter().map(|f| (f.text, f.entities)).collect(),
            generate: fixtures
                .generate
                .into_iter()
                .map(|f| ((f.prompt, f.seed), f.output))
                .collect(),
            refuse_nucleus: fixtures.refuse_nucleus,
        }
    }

    pub fn lexical() -> Self {
        Self::new(MockFixtures::default())
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let fixtures: MockFixtures = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        Ok(Self::new(fixtures))
    }

    fn handle_item(&self, route: &str, item: &Value) -> Result<Value, TransportError> {
        let field = |name: &str| -> Result<String, TransportError> {
            item.get(name)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| TransportError::Status {
                    code: 400,
                    body: format!("item missing string field {name:?}"),
                })
        };
        match route {
            "/score" => {
                let (a, b) = (field("a")?, field("b")?);
                let v = self
                    .score
                    .get(&(a.clone(), b.clone()))
                    .or_else(|| self.score.get(&(b.clone(), a.clone())))
                    .copied()
                    .unwrap_or_else(|| text::unigram_jaccard(&a, &b));
                Ok(json!(v))
            }
            "/paraphrase" => {
                let (a, b) = (field("a")?, field("b")?);
                let key = (a, b);
                let v = match self.paraphrase.get(&key) {
                    Some(v) => *v,
                    None => text::unigram_jaccard(&key.0, &key.1),
                };
                Ok(json!(v))
            }
            "/nli" => {
                let key = (field("premise")?, field("hypothesis")?);
                let probs = self
                    .nli
                    .get(&key)
                    .copied()
                    .unwrap_or_else(|| lexical_nli(&key.0, &key.1));
                Ok(json!(probs))
            }
            "/ner" => {
                let t = field("text")?;
                let ents = self.ner.get(&t).cloned().unwrap_or_else(|| capitalized_runs(&t));
                Ok(json!(ents))
            }
            "/generate" => {
                let prompt = field("prompt")?;
                let decoding = item.get("decoding").cloned().unwrap_or(Value::Null);
                let nucleus = decoding.get("mode").and_then(Value::as_str) == Some("nucleus");
                if nucleus && self.refuse_nucleus {
                    return Err(TransportError::Status {
                        code: 422,
                        body: "nucleus sampling not supported".into(),
                    });
                }
                let seed = if nucleus {
                    decoding.get("seed").and_then(Value::as_u64)
                } else {
                    None
                };
                if nucleus && seed.is_none() {
                    return Err(TransportError::Status {
                        code: 422,
                        body: "nucleus request without seed".into(),
                    });
                }
                self.generate
                    .get(&(prompt.clone(), seed))
                    .map(|s| json!(s))
                    .ok_or_else(|| TransportError::Status {
                        code: 404,
                        body: format!("no fixture for prompt {prompt:?} seed {seed:?}"),
                    })
            }
            other => Err(TransportError::Status {
                code: 404,
                body: format!("unknown route {other}"),
            }),
        }
    }
}

impl Transport for MockServer {
    fn post(&self, _endpoint: &ScorerEndpoint, route: &str, body: &Value) -> Result<Value, TransportError> {
        let items = body
            .get("items")
            .and_then(Value::as_array)
            .ok_or_else(|| TransportError::Status {
                code: 400,
                body: "request missing items".into(),
            })?;
        let results = items
            .iter()
            .map(|item| self.handle_item(route, item))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({ "results": results }))
    }
}

fn lexical_nli(premise: &str, hypothesis: &str) -> [f64; 3] {
    let split = |t: &str| -> (BTreeSet<String>, bool) {
        let mut negated = false;
        let mut set = BTreeSet::new();
        for tok in text::tokens(t) {
            if NEGATIONS.contains(&tok.as_str()) {
                negated = true;
            } else {
                set.insert(tok);
            }
        }
        (set, negated)
    };
    let (a, neg_a) = split(premise);
    let (b, neg_b) = split(hypothesis);
    let j = text::jaccard(&a, &b);
    if neg_a != neg_b {
        [0.0, 1.0 - j, j]
    } else {
        [j, 1.0 - j, 0.0]
    }
}

fn capitalized_runs(t: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let mut sentence_start = true;
    let flush = |run: &mut Vec<&str>, out: &mut Vec<String>| {
        if !run.is_empty() {
            out.push(run.join(" "));
            run.clear();
        }
    };
    for raw in t.split_whitespace() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let ends_sentence = raw.ends_with(['.', '?', '!']);
        if word.is_empty() {
            flush(&mut run, &mut out);
        } else if word.chars().all(|c| c.is_ascii_digit()) {
            flush(&mut run, &mut out);
            out.push(word.to_owned());
        } else if word.chars().next().is_some_and(char::is_uppercase)
            && !(sentence_start && SENTENCE_STARTERS.contains(&word))
        {
            run.push(word);
        } else {
            flush(&mut run, &mut out);
        }
        if ends_sentence || raw.ends_with(',') {
            flush(&mut run, &mut out);
        }
        sentence_start = ends_sentence;
    }
    flush(&mut run, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capitalized_run_tagging() {
        assert_eq!(capitalized_runs("Barack Obama visited Paris"), ["Barack Obama", "Paris"]);
        assert_eq!(capitalized_runs("The capital of France is Paris."), ["France", "Paris"]);
        assert_eq!(capitalized_runs("It was built in 1889 by Gustave Eiffel"), ["1889", "Gustave Eiffel"]);
        assert!(capitalized_runs("").is_empty());
    }

    #[test]
    fn lexical_nli_sums_to_one() {
        for (p, h) in [("a b c", "a b"), ("the sky is blue", "the sky is not blue"), ("", "")] {
            let v = lexical_nli(p, h);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(lexical_nli("x y", "x y"), [1.0, 0.0, 0.0]);
        assert_eq!(lexical_nli("x y", "not x y")[2], 1.0);
    }
}
