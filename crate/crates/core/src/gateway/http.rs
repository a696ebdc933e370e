//! OpenAI-compatible HTTP backend.
//!
//! POSTs `{base_url}/v1/chat/completions` with a JSON body of
//! `{model, messages, temperature, max_tokens, seed}` and reads
//! `choices[0].message.content`. The API key comes from a configured
//! environment variable and is sent as a bearer token. Transient failures
//! (connect/timeout errors, 429, 5xx) are retried with exponential backoff;
//! a bounded admission gate caps concurrent in-flight requests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, GatewayError, LlmResponse};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    /// Default model name for requests built from config.
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub max_retries: u32,
    /// Base backoff; attempt `i` sleeps `retry_backoff_ms << i`.
    pub retry_backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com".into(),
            model: super::DEFAULT_MODEL.into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            max_retries: 3,
            retry_backoff_ms: 250,
        }
    }
}

impl HttpConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidRequest("max_in_flight must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(GatewayError::InvalidRequest("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Counting semaphore; std has no stable one.
struct Gate {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Gate {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.available.notify_one();
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
    calls: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        let gate = Gate::new(config.max_in_flight);
        Ok(HttpBackend {
            config,
            client,
            gate,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, request: &ChatRequest, api_key: &str) -> Result<String, GatewayError> {
        let body = WireRequest {
            model: &request.model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role.as_str(),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(api_key)
            .json(&body)
            .send()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::HttpStatus {
                status: status.as_u16(),
                body: text.chars().take(400).collect(),
            });
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|_| GatewayError::MalformedResponse)?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or(GatewayError::MalformedResponse)?;
        if content.is_empty() {
            return Err(GatewayError::EmptyOutput);
        }
        Ok(content)
    }
}

fn transient(error: &GatewayError) -> bool {
    match error {
        GatewayError::Network(_) => true,
        GatewayError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError> {
        request.validate()?;
        // Configuration errors surface before any network traffic.
        let api_key = std::env::var(&self.config.api_key_env)
            .map_err(|_| GatewayError::MissingApiKey(self.config.api_key_env.clone()))?;
        self.gate.acquire();
        let result = (|| {
            let mut last: Option<GatewayError> = None;
            for attempt in 0..=self.config.max_retries {
                if attempt > 0 {
                    let backoff = self.config.retry_backoff_ms << (attempt - 1);
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                match self.attempt(request, &api_key) {
                    Ok(content) => {
                        self.calls.fetch_add(1, Ordering::SeqCst);
                        return Ok(LlmResponse {
                            content,
                            backend_id: self.id(),
                            cached: false,
                        });
                    }
                    Err(error) if transient(&error) => last = Some(error),
                    Err(error) => return Err(error),
                }
            }
            Err(GatewayError::RetriesExhausted {
                attempts: self.config.max_retries + 1,
                last: last.map(|e| e.to_string()).unwrap_or_default(),
            })
        })();
        self.gate.release();
        result
    }

    fn id(&self) -> String {
        format!("http:{}:{}", self.config.base_url, self.config.model)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::DEFAULT_MODEL;

    #[test]
    fn missing_api_key_fails_before_network() {
        let config = HttpConfig {
            api_key_env: "TEXTALIGN_TEST_KEY_THAT_IS_UNSET".into(),
            base_url: "http://127.0.0.1:1".into(),
            ..HttpConfig::default()
        };
        let backend = HttpBackend::new(config).unwrap();
        let request = ChatRequest::user(DEFAULT_MODEL, "hi\n\nEcho", 0.0, 1);
        match backend.complete(&request) {
            Err(GatewayError::MissingApiKey(var)) => {
                assert_eq!(var, "TEXTALIGN_TEST_KEY_THAT_IS_UNSET");
            }
            other => panic!("expected MissingApiKey, got {other:?}"),
        }
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn zero_in_flight_rejected() {
        let config = HttpConfig {
            max_in_flight: 0,
            ..HttpConfig::default()
        };
        assert!(HttpBackend::new(config).is_err());
    }
}
