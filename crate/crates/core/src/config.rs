//! TOML configuration: scorer endpoints, role assignments, thresholds,
//! decoding defaults and seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accuracy::{AccuracyMetric, AccuracyScope};
use crate::agreement::{AgreementContext, DirectionRule, DEFAULT_PP_AGREEMENT_THRESHOLD};
use crate::error::{Error, Result};
use crate::gateway::{EndpointKind, Gateway, ScorerEndpoint};
use crate::generation::{DEFAULT_ANSWER_TEMPLATE, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use crate::paraphrase::{DEFAULT_FILTER_THRESHOLD, DEFAULT_TOP_K};

/// Which configured endpoint serves each scoring role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    /// Answer generation (the model under evaluation).
    pub generator: Option<String>,
    /// Few-shot paraphrase generation.
    pub paraphraser: Option<String>,
    /// Paraphrase classifier used for filtering and the PP agreement.
    pub paraphrase: Option<String>,
    pub nli: Option<String>,
    pub ner: Option<String>,
    pub bertscore: Option<String>,
    pub bleurt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub threshold: f64,
    pub top_k: usize,
    /// Few-shot samples requested per question.
    pub per_method: usize,
    pub template_file: Option<PathBuf>,
    /// Add the unparaphrased question to each kept set.
    pub include_original: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_FILTER_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            per_method: 5,
            template_file: None,
            include_original: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementConfig {
    pub pp_threshold: f64,
    pub pp_rule: DirectionRule,
    pub soft: bool,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        Self {
            pp_threshold: DEFAULT_PP_AGREEMENT_THRESHOLD,
            pp_rule: DirectionRule::And,
            soft: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccuracyConfig {
    /// Accuracy metric that selects the answers PP+acc is computed over.
    pub pp_plus_acc_metric: AccuracyMetric,
    pub scope: AccuracyScope,
    pub references: ReferenceSet,
}

/// Which answers count as true references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSet {
    /// Every listed correct answer.
    #[default]
    All,
    /// Only the best answer.
    Best,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            pp_plus_acc_metric: AccuracyMetric::R1a,
            scope: AccuracyScope::All,
            references: ReferenceSet::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingDefaults {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub stop_sequences: Vec<String>,
    pub answer_template: String,
}

impl Default for DecodingDefaults {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            stop_sequences: vec!["\n".into()],
            answer_template: DEFAULT_ANSWER_TEMPLATE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    /// Questions sampled for the human study.
    pub sample: usize,
    /// Registered annotator ids; empty accepts any id.
    pub annotators: Vec<String>,
    pub port: u16,
    pub ui_dir: Option<PathBuf>,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            sample: 100,
            annotators: Vec::new(),
            port: 8080,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub questions: PathBuf,
    pub paraphrases: PathBuf,
    pub runs_dir: PathBuf,
    pub cache_path: Option<PathBuf>,
    pub roles: Roles,
    pub filter: FilterConfig,
    pub agreement: AgreementConfig,
    pub accuracy: AccuracyConfig,
    pub decoding: DecodingDefaults,
    pub annotation: AnnotationConfig,
    pub endpoints: Vec<ScorerEndpoint>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            questions: "questions.jsonl".into(),
            paraphrases: "paraphrases.jsonl".into(),
            runs_dir: "runs".into(),
            cache_path: Some(".concord-cache.jsonl".into()),
            roles: Roles::default(),
            filter: FilterConfig::default(),
            agreement: AgreementConfig::default(),
            accuracy: AccuracyConfig::default(),
            decoding: DecodingDefaults::default(),
            annotation: AnnotationConfig::default(),
            endpoints: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// `CONCORD_SCORER_<NAME>_URL`, with the endpoint name upper-cased and
/// non-alphanumerics mapped to `_`.
pub fn url_env_var(endpoint_name: &str) -> String {
    let name: String = endpoint_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("CONCORD_SCORER_{name}_URL")
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, |k| std::env::var(k).ok())
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// Parses TOML text. `env` supplies URL overrides.
    pub fn parse(text: &str, base_dir: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = if base_dir.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base_dir.to_path_buf()
        };
        for ep in &mut cfg.endpoints {
            if let Some(url) = env(&url_env_var(&ep.name)) {
                ep.base_url = url;
            }
            if let Some(rest) = ep.base_url.strip_prefix("mock:") {
                if !rest.is_empty() && Path::new(rest).is_relative() {
                    ep.base_url = format!("mock:{}", cfg.base_dir.join(rest).display());
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for ep in &self.endpoints {
            if seen.insert(ep.name.as_str(), ()).is_some() {
                return Err(Error::Config(format!("endpoint {:?} defined twice", ep.name)));
            }
            ep.validate()?;
        }
        let checks: [(&str, &Option<String>, EndpointKind); 7] = [
            ("generator", &self.roles.generator, EndpointKind::TextGeneration),
            ("paraphraser", &self.roles.paraphraser, EndpointKind::TextGeneration),
            ("paraphrase", &self.roles.paraphrase, EndpointKind::Paraphrase),
            ("nli", &self.roles.nli, EndpointKind::Nli),
            ("ner", &self.roles.ner, EndpointKind::Ner),
            ("bertscore", &self.roles.bertscore, EndpointKind::PairScore),
            ("bleurt", &self.roles.bleurt, EndpointKind::PairScore),
        ];
        for (role, name, kind) in checks {
            let Some(name) = name else { continue };
            let ep = self
                .endpoint(name)
                .ok_or_else(|| Error::Config(format!("role `{role}` names undefined endpoint {name:?}")))?;
            if ep.kind != kind {
                return Err(Error::Config(format!(
                    "role `{role}` needs a {} endpoint but {name:?} is {}",
                    kind.as_str(),
                    ep.kind.as_str()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.filter.threshold) {
            return Err(Error::Config(format!("filter.threshold {} outside [0, 1]", self.filter.threshold)));
        }
        if !(0.0..=1.0).contains(&self.agreement.pp_threshold) {
            return Err(Error::Config(format!(
                "agreement.pp_threshold {} outside [0, 1]",
                self.agreement.pp_threshold
            )));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn endpoint(&self, name: &str) -> Option<&ScorerEndpoint> {
        self.endpoints.iter().find(|e| e.name == name)
    }

    pub fn role(&self, role: &str) -> Option<ScorerEndpoint> {
        let name = match role {
            "generator" => &self.roles.generator,
            "paraphraser" => &self.roles.paraphraser,
            "paraphrase" => &self.roles.paraphrase,
            "nli" => &self.roles.nli,
            "ner" => &self.roles.ner,
            "bertscore" => &self.roles.bertscore,
            "bleurt" => &self.roles.bleurt,
            _ => &None,
        };
        name.as_deref().and_then(|n| self.endpoint(n)).cloned()
    }

    pub fn require_role(&self, role: &str) -> Result<ScorerEndpoint> {
        self.role(role)
            .ok_or_else(|| Error::Config(format!("no endpoint is configured for the `{role}` role")))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.resolve(&self.runs_dir)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_dir().join(run_id)
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let cache = self.cache_path.as_deref().map(|p| self.resolve(p));
        Ok(Gateway::open(cache.as_deref())?)
    }

    pub fn agreement_context<'a>(&self, gateway: &'a Gateway) -> AgreementContext<'a> {
        AgreementContext {
            bertscore: self.role("bertscore"),
            paraphrase: self.role("paraphrase"),
            nli: self.role("nli"),
            ner: self.role("ner"),
            pp_threshold: self.agreement.pp_threshold,
            pp_rule: self.agreement.pp_rule,
            soft: self.agreement.soft,
            ..AgreementContext::new(gateway)
        }
    }

    /// Model tag per configured scoring role, for run manifests.
    pub fn scorer_versions(&self) -> BTreeMap<String, String> {
        ["paraphrase", "nli", "ner", "bertscore", "bleurt"]
            .into_iter()
            .filter_map(|r| self.role(r).map(|e| (r.to_owned(), e.model_tag)))
            .collect()
    }
}
