//! Client layer over remote model-backed scorers.
//!
//! Every endpoint kind speaks the same JSON contract: `POST <base_url><route>`
//! with `{"model_tag": .., "items": [..]}` and a `{"results": [..]}` reply,
//! one result per item in request order. Responses are cached by content
//! hash, so repeated requests never reach the network twice.

mod cache;
pub mod mock;
mod transport;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use cache::{cache_key, ScoreCache};
pub use mock::{MockFixtures, MockServer};
pub use transport::{HttpTransport, RoutingTransport, Transport, TransportError, API_KEY_ENV};

use crate::generation::DecodingConfig;

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("endpoint {endpoint}: transport error after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("endpoint {endpoint}: protocol error: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("endpoint {endpoint}: configuration error: {message}")]
    Config { endpoint: String, message: String },
    #[error("score cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    PairScore,
    Nli,
    Paraphrase,
    Ner,
    TextGeneration,
}

impl EndpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EndpointKind::PairScore => "pair_score",
            EndpointKind::Nli => "nli",
            EndpointKind::Paraphrase => "paraphrase",
            EndpointKind::Ner => "ner",
            EndpointKind::TextGeneration => "text_generation",
        }
    }

    pub fn route(self) -> &'static str {
        match self {
            EndpointKind::PairScore => "/score",
            EndpointKind::Nli => "/nli",
            EndpointKind::Paraphrase => "/paraphrase",
            EndpointKind::Ner => "/ner",
            EndpointKind::TextGeneration => "/generate",
        }
    }
}

fn default_timeout() -> f64 {
    60.0
}

fn default_max_batch() -> usize {
    32
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerEndpoint {
    pub name: String,
    pub kind: EndpointKind,
    pub base_url: String,
    pub model_tag: String,
    /// Request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    /// Maximum in-flight requests to this endpoint.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ScorerEndpoint {
    pub fn new(name: &str, kind: EndpointKind, base_url: &str, model_tag: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            base_url: base_url.into(),
            model_tag: model_tag.into(),
            timeout: default_timeout(),
            max_batch: default_max_batch(),
            concurrency: default_concurrency(),
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_batch == 0 {
            return Err(self.config_error("max_batch must be at least 1"));
        }
        if self.concurrency == 0 {
            return Err(self.config_error("concurrency must be at least 1"));
        }
        Ok(())
    }

    fn config_error(&self, message: impl Into<String>) -> GatewayError {
        GatewayError::Config {
            endpoint: self.name.clone(),
            message: message.into(),
        }
    }

    fn protocol_error(&self, message: impl Into<String>) -> GatewayError {
        GatewayError::Protocol {
            endpoint: self.name.clone(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliClass {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub p_entail: f64,
    pub p_neutral: f64,
    pub p_contra: f64,
}

impl NliVerdict {
    pub fn new(p_entail: f64, p_neutral: f64, p_contra: f64) -> Result<Self, String> {
        let v = Self {
            p_entail,
            p_neutral,
            p_contra,
        };
        for p in [p_entail, p_neutral, p_contra] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0, 1]"));
            }
        }
        let sum = p_entail + p_neutral + p_contra;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("probabilities sum to {sum}, not 1"));
        }
        Ok(v)
    }

    /// Strict argmax; ties resolve in class order entailment, neutral, contradiction.
    pub fn argmax(&self) -> NliClass {
        let mut best = (NliClass::Entailment, self.p_entail);
        for (class, p) in [
            (NliClass::Neutral, self.p_neutral),
            (NliClass::Contradiction, self.p_contra),
        ] {
            if p > best.1 {
                best = (class, p);
            }
        }
        best.0
    }

    pub fn prob(&self, class: NliClass) -> f64 {
        match class {
            NliClass::Entailment => self.p_entail,
            NliClass::Neutral => self.p_neutral,
            NliClass::Contradiction => self.p_contra,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore lock");
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    cache: ScoreCache,
    retry: RetryPolicy,
    limits: Mutex<HashMap<String, Arc<Semaphore>>>,
    upstream_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>, cache: ScoreCache) -> Self {
        Self {
            transport,
            cache,
            retry: RetryPolicy::default(),
            limits: Mutex::new(HashMap::new()),
            upstream_calls: AtomicUsize::new(0),
        }
    }

    /// Gateway routing `mock:` endpoints in-process and the rest over HTTP,
    /// with a persistent cache at `cache_path` (in-memory when `None`).
    pub fn open(cache_path: Option<&Path>) -> Result<Self, GatewayError> {
        let cache = match cache_path {
            Some(p) => ScoreCache::open(p)?,
            None => ScoreCache::in_memory(),
        };
        Ok(Self::new(Arc::new(RoutingTransport::new()), cache))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Number of upstream requests issued so far (cache hits excluded).
    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    pub fn score_pairs(&self, ep: &ScorerEndpoint, pairs: &[(&str, &str)]) -> Result<Vec<f64>, GatewayError> {
        let items = pairs.iter().map(|(a, b)| json!({"a": a, "b": b})).collect();
        collect(self.request(ep, EndpointKind::PairScore, items, decode_unit_interval))
    }

    pub fn classify_nli(&self, ep: &ScorerEndpoint, pairs: &[(&str, &str)]) -> Result<Vec<NliVerdict>, GatewayError> {
        let items = pairs
            .iter()
            .map(|(p, h)| json!({"premise": p, "hypothesis": h}))
            .collect();
        collect(self.request(ep, EndpointKind::Nli, items, decode_nli))
    }

    pub fn classify_paraphrase(&self, ep: &ScorerEndpoint, pairs: &[(&str, &str)]) -> Result<Vec<f64>, GatewayError> {
        collect(self.classify_paraphrase_partial(ep, pairs))
    }

    /// Per-item results; a failed batch fails only its own items.
    pub fn classify_paraphrase_partial(
        &self,
        ep: &ScorerEndpoint,
        pairs: &[(&str, &str)],
    ) -> Vec<Result<f64, GatewayError>> {
        let items = pairs.iter().map(|(a, b)| json!({"a": a, "b": b})).collect();
        self.request(ep, EndpointKind::Paraphrase, items, decode_unit_interval)
    }

    /// Entity sets with entities lowercased and whitespace-normalized.
    pub fn extract_entities(&self, ep: &ScorerEndpoint, texts: &[&str]) -> Result<Vec<BTreeSet<String>>, GatewayError> {
        let items = texts.iter().map(|t| json!({"text": t})).collect();
        collect(self.request(ep, EndpointKind::Ner, items, decode_entities))
    }

    pub fn complete_text(&self, ep: &ScorerEndpoint, prompt: &str, decoding: &DecodingConfig) -> Result<String, GatewayError> {
        self.complete_batch(ep, &[prompt], decoding)
            .pop()
            .expect("one result per prompt")
    }

    pub fn complete_batch(
        &self,
        ep: &ScorerEndpoint,
        prompts: &[&str],
        decoding: &DecodingConfig,
    ) -> Vec<Result<String, GatewayError>> {
        if let Err(msg) = decoding.validate() {
            return prompts.iter().map(|_| Err(ep.config_error(msg.clone()))).collect();
        }
        let decoding = serde_json::to_value(decoding.canonical()).expect("decoding serializes");
        let items = prompts
            .iter()
            .map(|p| json!({"prompt": p, "decoding": decoding}))
            .collect();
        self.request(ep, EndpointKind::TextGeneration, items, decode_string)
    }

    fn limit_for(&self, ep: &ScorerEndpoint) -> Arc<Semaphore> {
        self.limits
            .lock()
            .expect("limits lock")
            .entry(ep.name.clone())
            .or_insert_with(|| Arc::new(Semaphore::new(ep.concurrency.max(1))))
            .clone()
    }

    fn request<T, D>(&self, ep: &ScorerEndpoint, kind: EndpointKind, items: Vec<Value>, decode: D) -> Vec<Result<T, GatewayError>>
    where
        D: Fn(&Value) -> Result<T, String> + Sync,
    {
        if ep.kind != kind {
            let msg = format!("endpoint kind is {}, request needs {}", ep.kind.as_str(), kind.as_str());
            return items.iter().map(|_| Err(ep.config_error(msg.clone()))).collect();
        }
        if let Err(e) = ep.validate() {
            let msg = e.to_string();
            return items.iter().map(|_| Err(ep.config_error(msg.clone()))).collect();
        }

        let keys: Vec<String> = items.iter().map(|it| cache_key(kind, &ep.model_tag, it)).collect();
        let mut pending: Vec<(String, Value)> = Vec::new();
        let mut queued = std::collections::HashSet::new();
        for (key, item) in keys.iter().zip(&items) {
            if !self.cache.contains(key) && queued.insert(key.clone()) {
                pending.push((key.clone(), item.clone()));
            }
        }

        let chunks: Vec<&[(String, Value)]> = pending.chunks(ep.max_batch).collect();
        let failures: Mutex<HashMap<String, GatewayError>> = Mutex::new(HashMap::new());

        if !chunks.is_empty() {
            let limit = self.limit_for(ep);
            let next = AtomicUsize::new(0);
            let workers = ep.concurrency.max(1).min(chunks.len());
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let idx = next.fetch_add(1, Ordering::SeqCst);
                        let Some(chunk) = chunks.get(idx) else { break };
                        let _permit = limit.acquire();
                        if let Err(err) = self.send_chunk(ep, kind, chunk, &decode) {
                            let mut f = failures.lock().expect("failure lock");
                            for (key, _) in chunk.iter() {
                                f.insert(key.clone(), err.clone());
                            }
                        }
                    });
                }
            });
        }

        let failures = failures.into_inner().expect("failure lock");
        keys.iter()
            .map(|key| {
                if let Some(err) = failures.get(key) {
                    return Err(err.clone());
                }
                let value = self
                    .cache
                    .get(key)
                    .ok_or_else(|| ep.protocol_error("response missing from cache"))?;
                decode(&value).map_err(|m| ep.protocol_error(m))
            })
            .collect()
    }

    fn send_chunk<T, D>(&self, ep: &ScorerEndpoint, kind: EndpointKind, chunk: &[(String, Value)], decode: &D) -> Result<(), GatewayError>
    where
        D: Fn(&Value) -> Result<T, String>,
    {
        let body = json!({
            "model_tag": ep.model_tag,
            "items": chunk.iter().map(|(_, it)| it.clone()).collect::<Vec<_>>(),
        });
        let response = self.post_with_retry(ep, kind.route(), &body)?;
        let results = response
            .get("results")
            .and_then(Value::as_array)
            .ok_or_else(|| ep.protocol_error("response has no results array"))?;
        if results.len() != chunk.len() {
            return Err(ep.protocol_error(format!(
                "expected {} results, got {}",
                chunk.len(),
                results.len()
            )));
        }
        for r in results {
            decode(r).map_err(|m| ep.protocol_error(m))?;
        }
        let entries = chunk
            .iter()
            .zip(results)
            .map(|((key, _), r)| (key.clone(), r.clone()))
            .collect();
        self.cache.insert_many(entries)
    }

    fn post_with_retry(&self, ep: &ScorerEndpoint, route: &str, body: &Value) -> Result<Value, GatewayError> {
        let attempts = self.retry.attempts.max(1);
        let mut delay = self.retry.base_delay;
        let mut last = None;
        for attempt in 1..=attempts {
            self.upstream_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.post(ep, route, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    log::warn!("{}: attempt {attempt}/{attempts} failed: {e}", ep.name);
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
                Err(TransportError::Status { code, body }) if code == 422 || code == 400 => {
                    return Err(ep.config_error(format!("request refused (HTTP {code}): {body}")))
                }
                Err(e) => return Err(ep.protocol_error(e.to_string())),
            }
        }
        Err(GatewayError::Transport {
            endpoint: ep.name.clone(),
            attempts,
            message: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }
}

fn collect<T>(results: Vec<Result<T, GatewayError>>) -> Result<Vec<T>, GatewayError> {
    results.into_iter().collect()
}

fn decode_unit_interval(v: &Value) -> Result<f64, String> {
    let x = v.as_f64().ok_or_else(|| format!("expected a number, got {v}"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("score {x} outside [0, 1]"))
    }
}

fn decode_nli(v: &Value) -> Result<NliVerdict, String> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 3)
        .ok_or_else(|| format!("expected [p_entail, p_neutral, p_contra], got {v}"))?;
    let p: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("non-numeric probability {x}")))
        .collect::<Result<_, _>>()?;
    NliVerdict::new(p[0], p[1], p[2])
}

fn decode_entities(v: &Value) -> Result<BTreeSet<String>, String> {
    let arr = v.as_array().ok_or_else(|| format!("expected an entity list, got {v}"))?;
    arr.iter()
        .map(|e| {
            e.as_str()
                .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
                .ok_or_else(|| format!("non-string entity {e}"))
        })
        .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
        .collect()
}

fn decode_string(v: &Value) -> Result<String, String> {
    v.as_str()
        .map(str::to_owned)
        .ok_or_else(|| format!("expected a string, got {v}"))
}
