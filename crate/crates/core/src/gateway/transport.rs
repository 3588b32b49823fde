use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::mock::MockServer;
use super::ScorerEndpoint;

pub const API_KEY_ENV: &str = "CONCORD_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Unreachable(String),
    Timeout,
    Status { code: u16, body: String },
    InvalidBody(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Unreachable(_) | TransportError::Timeout => true,
            TransportError::Status { code, .. } => *code >= 500,
            TransportError::InvalidBody(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Unreachable(m) => write!(f, "unreachable: {m}"),
            TransportError::Timeout => write!(f, "timed out"),
            TransportError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            TransportError::InvalidBody(m) => write!(f, "invalid response body: {m}"),
        }
    }
}

/// Sends one JSON request body to an endpoint route and returns the JSON
/// response body.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &ScorerEndpoint, route: &str, body: &Value) -> Result<Value, TransportError>;
}

impl<F> Transport for F
where
    F: Fn(&ScorerEndpoint, &str, &Value) -> Result<Value, TransportError> + Send + Sync,
{
    fn post(&self, endpoint: &ScorerEndpoint, route: &str, body: &Value) -> Result<Value, TransportError> {
        self(endpoint, route, body)
    }
}

/// JSON over HTTP POST. `CONCORD_API_KEY`, when set, is sent as a bearer token.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &ScorerEndpoint, route: &str, body: &Value) -> Result<Value, TransportError> {
        let url = format!("{}{route}", endpoint.base_url.trim_end_matches('/'));
        let mut req = self
            .client
            .post(&url)
            .timeout(Duration::from_secs_f64(endpoint.timeout.max(0.001)))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Unreachable(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Unreachable(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(TransportError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::InvalidBody(e.to_string()))
    }
}

/// Dispatches `mock:` URLs to in-process mock servers and everything else to HTTP.
///
/// `mock:` alone selects the lexical mock; `mock:<path>` loads a fixture file.
pub struct RoutingTransport {
    http: HttpTransport,
    mocks: Mutex<HashMap<String, Arc<MockServer>>>,
}

impl RoutingTransport {
    pub fn new() -> Self {
        Self {
            http: HttpTransport::new(),
            mocks: Mutex::new(HashMap::new()),
        }
    }

    fn mock_for(&self, fixture: &str) -> Result<Arc<MockServer>, TransportError> {
        let mut mocks = self.mocks.lock().expect("mock registry lock");
        if let Some(m) = mocks.get(fixture) {
            return Ok(m.clone());
        }
        let server = if fixture.is_empty() {
            MockServer::lexical()
        } else {
            MockServer::from_file(&PathBuf::from(fixture))
                .map_err(|e| TransportError::Unreachable(format!("mock fixture {fixture}: {e}")))?
        };
        let server = Arc::new(server);
        mocks.insert(fixture.to_owned(), server.clone());
        Ok(server)
    }
}

impl Default for RoutingTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for RoutingTransport {
    fn post(&self, endpoint: &ScorerEndpoint, route: &str, body: &Value) -> Result<Value, TransportError> {
        match endpoint.base_url.strip_prefix("mock:") {
            Some(fixture) => self.mock_for(fixture)?.post(endpoint, route, body),
            None => self.http.post(endpoint, route, body),
        }
    }
}
