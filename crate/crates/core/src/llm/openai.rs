use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tracing::warn;

use super::{Completion, CompletionRequest, EmbeddingVector, LlmError, Provider, TokenInfo};

/// Environment variable holding the provider key.
pub const API_KEY_ENV: &str = "BUMPER_API_KEY";
/// Environment variable overriding the provider base URL.
pub const BASE_URL_ENV: &str = "BUMPER_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

#[derive(Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub embedding_model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Alternatives requested per token for diagnostics.
    pub top_logprobs: u8,
}

impl std::fmt::Debug for OpenAiConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("embedding_model", &self.embedding_model)
            .finish()
    }
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            api_key: None,
            embedding_model: "text-embedding-3-small".into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            top_logprobs: 5,
        }
    }
}

impl OpenAiConfig {
    /// Fills the key and base URL from the environment when set.
    pub fn from_env(mut self) -> Self {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        self
    }
}

/// Client for OpenAI-compatible `/chat/completions` and `/embeddings`.
pub struct OpenAiProvider {
    config: OpenAiConfig,
    // Built on first use so that construction inside an async runtime is safe.
    http: OnceLock<reqwest::blocking::Client>,
}

impl OpenAiProvider {
    pub fn new(config: OpenAiConfig) -> Self {
        Self { config, http: OnceLock::new() }
    }

    fn http(&self) -> &reqwest::blocking::Client {
        self.http.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.config.timeout)
                .build()
                .expect("failed to build HTTP client")
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let mut req = self.http().post(self.url(path)).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Provider {
            message: format!("transport: {e}"),
            retryable: true,
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Provider {
            message: format!("reading body: {e}"),
            retryable: true,
        })?;
        if status.as_u16() == 429 {
            return Err(LlmError::Provider {
                message: format!("rate limited (HTTP 429): {}", truncate(&text, 200)),
                retryable: true,
            });
        }
        if !status.is_success() {
            return Err(LlmError::Provider {
                message: format!("HTTP {}: {}", status.as_u16(), truncate(&text, 200)),
                retryable: false,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| LlmError::Protocol(format!("response is not JSON: {e}")))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let attempts = self.config.retry.attempts.max(1);
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let delay = self.config.retry.base_delay * 2u32.pow(attempt);
                    warn!(%e, attempt, ?delay, "retrying provider request");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    bytes: Option<Vec<u8>>,
    #[serde(default)]
    top_logprobs: Vec<WireTop>,
}

#[derive(Deserialize)]
struct WireTop {
    token: String,
    logprob: f64,
}

/// Parses a chat-completions response body.
pub(crate) fn parse_chat_response(body: Value) -> Result<Completion, LlmError> {
    let parsed: ChatResponse = serde_json::from_value(body)
        .map_err(|e| LlmError::Protocol(format!("malformed chat response: {e}")))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| LlmError::Protocol("choice has no message content".into()))?;
    let wire = choice.logprobs.and_then(|l| l.content).unwrap_or_default();
    if wire.iter().any(|t| !t.logprob.is_finite()) {
        return Err(LlmError::Protocol("non-finite logprob in response".into()));
    }

    let mut tokens: Vec<TokenInfo> = wire
        .iter()
        .map(|t| TokenInfo {
            token: t.token.clone(),
            // providers occasionally round tiny negatives up to +0.0
            logprob: t.logprob.min(0.0),
            top_logprobs: t.top_logprobs.iter().map(|a| (a.token.clone(), a.logprob.min(0.0))).collect(),
        })
        .collect();

    let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
    if !tokens.is_empty() && joined != text {
        // Multi-byte characters may be split across tokens; fall back to the
        // raw bytes and assign each token the characters it completes.
        if wire.iter().all(|t| t.bytes.is_some()) {
            let mut buf: Vec<u8> = Vec::new();
            let mut consumed = 0;
            for (tok, w) in tokens.iter_mut().zip(&wire) {
                buf.extend(w.bytes.as_deref().unwrap_or_default());
                let valid = match std::str::from_utf8(&buf) {
                    Ok(s) => s.len(),
                    Err(e) => e.valid_up_to(),
                };
                tok.token = String::from_utf8_lossy(&buf[consumed..valid]).into_owned();
                consumed = valid;
            }
        }
        let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
        if joined != text {
            return Err(LlmError::Protocol("token strings do not reproduce the content".into()));
        }
    }
    Ok(Completion { text, tokens })
}

pub(crate) fn parse_embedding_response(body: Value) -> Result<EmbeddingVector, LlmError> {
    let values = body
        .get("data")
        .and_then(|d| d.get(0))
        .and_then(|d| d.get("embedding"))
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Protocol("embedding response missing data[0].embedding".into()))?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| LlmError::Protocol("non-numeric embedding value".into())))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingVector::new(values).map_err(|e| LlmError::Protocol(e.to_string()))
}

impl Provider for OpenAiProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": request.want_logprobs,
        });
        if request.want_logprobs && self.config.top_logprobs > 0 {
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        parse_chat_response(self.post("chat/completions", &body)?)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        let body = json!({ "model": self.config.embedding_model, "input": text });
        parse_embedding_response(self.post("embeddings", &body)?)
    }

    fn name(&self) -> &str {
        "openai-compatible"
    }
}
