//! Agreement functions: maps from an ordered pair of generated texts to
//! `[0, 1]`.
//!
//! Equality, ROUGE-1 and entity overlap are computed locally (entity sets
//! come from a tagger endpoint). BERTScore, paraphrase and NLI agreement are
//! backed by scorer endpoints through the [`Gateway`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, NliClass, NliVerdict, ScorerEndpoint};
use crate::text;

pub const DEFAULT_PP_AGREEMENT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementName {
    Equality,
    Rouge1,
    NerOverlap,
    Bertscore,
    Paraphrase,
    Entailment,
    Contradiction,
}

impl AgreementName {
    pub const ALL: [AgreementName; 7] = [
        AgreementName::Equality,
        AgreementName::Rouge1,
        AgreementName::NerOverlap,
        AgreementName::Bertscore,
        AgreementName::Paraphrase,
        AgreementName::Entailment,
        AgreementName::Contradiction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgreementName::Equality => "equality",
            AgreementName::Rouge1 => "rouge1",
            AgreementName::NerOverlap => "ner_overlap",
            AgreementName::Bertscore => "bertscore",
            AgreementName::Paraphrase => "paraphrase",
            AgreementName::Entailment => "entailment",
            AgreementName::Contradiction => "contradiction",
        }
    }

    pub fn symmetric(self) -> bool {
        !matches!(self, AgreementName::Entailment | AgreementName::Contradiction)
    }

    pub fn binary(self) -> bool {
        matches!(
            self,
            AgreementName::Equality | AgreementName::Paraphrase | AgreementName::Entailment | AgreementName::Contradiction
        )
    }
}

impl fmt::Display for AgreementName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgreementName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgreementName::ALL
            .into_iter()
            .find(|n| n.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown agreement function {s:?}; expected one of {}",
                    AgreementName::ALL.map(AgreementName::as_str).join(", ")
                ))
            })
    }
}

/// An agreement function evaluated in batches.
pub trait Agreement: Sync {
    fn name(&self) -> &str;
    fn symmetric(&self) -> bool;
    fn binary(&self) -> bool;
    /// One value in `[0, 1]` per `(y_i, y_j)` pair, in input order.
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>>;
}

/// 1 iff the normalized texts are identical.
pub fn equality(a: &str, b: &str) -> f64 {
    if text::normalize(a) == text::normalize(b) {
        1.0
    } else {
        0.0
    }
}

/// Unigram-overlap F1 with clipped counts.
///
/// Two empty token sequences score 1, exactly one empty scores 0.
pub fn rouge1_f1(a: &str, b: &str) -> f64 {
    let ta = text::tokens(a);
    let tb = text::tokens(b);
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &ta {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    (2 * overlap) as f64 / (ta.len() + tb.len()) as f64
}

pub fn entity_jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    text::jaccard(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionRule {
    /// Both directions must pass.
    #[default]
    And,
    /// Either direction passing suffices.
    Or,
}

/// Symmetrized paraphrase decision from forward and backward probabilities.
pub fn paraphrase_decision(forward: f64, backward: f64, threshold: f64, rule: DirectionRule) -> f64 {
    let (f, b) = (forward >= threshold, backward >= threshold);
    let pass = match rule {
        DirectionRule::And => f && b,
        DirectionRule::Or => f || b,
    };
    if pass {
        1.0
    } else {
        0.0
    }
}

pub fn nli_decision(verdict: &NliVerdict, label: NliClass) -> f64 {
    if verdict.argmax() == label {
        1.0
    } else {
        0.0
    }
}

pub struct Equality;

impl Agreement for Equality {
    fn name(&self) -> &str {
        AgreementName::Equality.as_str()
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn binary(&self) -> bool {
        true
    }
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        Ok(pairs.iter().map(|(a, b)| equality(a, b)).collect())
    }
}

pub struct Rouge1;

impl Agreement for Rouge1 {
    fn name(&self) -> &str {
        AgreementName::Rouge1.as_str()
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn binary(&self) -> bool {
        false
    }
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        Ok(pairs.iter().map(|(a, b)| rouge1_f1(a, b)).collect())
    }
}

/// Jaccard overlap of tagger entity sets.
pub struct NerOverlap<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: ScorerEndpoint,
}

impl Agreement for NerOverlap<'_> {
    fn name(&self) -> &str {
        AgreementName::NerOverlap.as_str()
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn binary(&self) -> bool {
        false
    }
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        let mut unique: Vec<&str> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        unique.sort_unstable();
        unique.dedup();
        let sets = self.gateway.extract_entities(&self.endpoint, &unique)?;
        let lookup: HashMap<&str, &BTreeSet<String>> = unique.iter().copied().zip(sets.iter()).collect();
        Ok(pairs
            .iter()
            .map(|(a, b)| entity_jaccard(lookup[a], lookup[b]))
            .collect())
    }
}

/// Endpoint pair F1, passed through unchanged.
pub struct BertScore<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: ScorerEndpoint,
}

impl Agreement for BertScore<'_> {
    fn name(&self) -> &str {
        AgreementName::Bertscore.as_str()
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn binary(&self) -> bool {
        false
    }
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        Ok(self.gateway.score_pairs(&self.endpoint, pairs)?)
    }
}

/// Paraphrase-classifier agreement, symmetrized over both directions.
///
/// With `soft` set the raw probabilities are combined (min for `And`, max for
/// `Or`) instead of thresholded.
pub struct ParaphraseAgreement<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: ScorerEndpoint,
    pub threshold: f64,
    pub rule: DirectionRule,
    pub soft: bool,
}

impl Agreement for ParaphraseAgreement<'_> {
    fn name(&self) -> &str {
        AgreementName::Paraphrase.as_str()
    }
    fn symmetric(&self) -> bool {
        true
    }
    fn binary(&self) -> bool {
        !self.soft
    }
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        let both: Vec<(&str, &str)> = pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        let probs = self.gateway.classify_paraphrase(&self.endpoint, &both)?;
        Ok(probs
            .chunks_exact(2)
            .map(|fb| {
                let (f, b) = (fb[0], fb[1]);
                match (self.soft, self.rule) {
                    (true, DirectionRule::And) => f.min(b),
                    (true, DirectionRule::Or) => f.max(b),
                    (false, rule) => paraphrase_decision(f, b, self.threshold, rule),
                }
            })
            .collect())
    }
}

/// Directional NLI agreement: 1 iff the argmax class is `label`.
pub struct NliAgreement<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: ScorerEndpoint,
    pub label: NliClass,
    pub soft: bool,
}

impl Agreement for NliAgreement<'_> {
    fn name(&self) -> &str {
        match self.label {
            NliClass::Contradiction => AgreementName::Contradiction.as_str(),
            _ => AgreementName::Entailment.as_str(),
        }
    }
    fn symmetric(&self) -> bool {
        false
    }
    fn binary(&self) -> bool {
        !self.soft
    }
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        let verdicts = self.gateway.classify_nli(&self.endpoint, pairs)?;
        Ok(verdicts
            .iter()
            .map(|v| {
                if self.soft {
                    v.prob(self.label)
                } else {
                    nli_decision(v, self.label)
                }
            })
            .collect())
    }
}

/// Endpoints and thresholds needed to build agreement functions by name.
pub struct AgreementContext<'a> {
    pub gateway: &'a Gateway,
    pub bertscore: Option<ScorerEndpoint>,
    pub paraphrase: Option<ScorerEndpoint>,
    pub nli: Option<ScorerEndpoint>,
    pub ner: Option<ScorerEndpoint>,
    pub pp_threshold: f64,
    pub pp_rule: DirectionRule,
    pub soft: bool,
}

impl<'a> AgreementContext<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self {
            gateway,
            bertscore: None,
            paraphrase: None,
            nli: None,
            ner: None,
            pp_threshold: DEFAULT_PP_AGREEMENT_THRESHOLD,
            pp_rule: DirectionRule::And,
            soft: false,
        }
    }

    pub fn build(&self, name: AgreementName) -> Result<Box<dyn Agreement + 'a>> {
        let need = |ep: &Option<ScorerEndpoint>, role: &str| {
            ep.clone().ok_or_else(|| {
                Error::Config(format!(
                    "agreement function {name} needs the `{role}` endpoint, which is not configured"
                ))
            })
        };
        let gateway = self.gateway;
        Ok(match name {
            AgreementName::Equality => Box::new(Equality),
            AgreementName::Rouge1 => Box::new(Rouge1),
            AgreementName::NerOverlap => Box::new(NerOverlap {
                gateway,
                endpoint: need(&self.ner, "ner")?,
            }),
            AgreementName::Bertscore => Box::new(BertScore {
                gateway,
                endpoint: need(&self.bertscore, "bertscore")?,
            }),
            AgreementName::Paraphrase => Box::new(ParaphraseAgreement {
                gateway,
                endpoint: need(&self.paraphrase, "paraphrase")?,
                threshold: self.pp_threshold,
                rule: self.pp_rule,
                soft: self.soft,
            }),
            AgreementName::Entailment | AgreementName::Contradiction => Box::new(NliAgreement {
                gateway,
                endpoint: need(&self.nli, "nli")?,
                label: if name == AgreementName::Entailment {
                    NliClass::Entailment
                } else {
                    NliClass::Contradiction
                },
                soft: self.soft,
            }),
        })
    }
}
