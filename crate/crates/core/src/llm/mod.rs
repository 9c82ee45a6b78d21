//! Chat-completion and embedding providers.
//!
//! Every LLM call in the crate goes through [`LlmClient`], which validates the
//! request, bounds the number of in-flight provider calls and appends each
//! request/response pair to an optional audit log. Two providers exist: an
//! OpenAI-compatible HTTP client ([`OpenAiProvider`]) and a scripted,
//! fully deterministic [`MockProvider`] for offline use.

mod audit;
mod mock;
mod openai;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

pub use audit::{AuditLog, AuditRecord};
pub use mock::{fingerprint, normalize_prompt, tokenize, MockProvider, MockResponse, MockRule, MockScript};
pub use openai::{OpenAiConfig, OpenAiProvider, RetryPolicy, API_KEY_ENV, BASE_URL_ENV};

/// Default cap on concurrent provider requests.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    /// Transport-level failure or rate limiting; the request may be retried.
    #[error("provider error (retryable={retryable}): {message}")]
    Provider { message: String, retryable: bool },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("completion carries no token log-probabilities")]
    MissingLogprobs,
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Provider { retryable: true, .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    /// Sampling seed forwarded to the provider. The mock uses it to pick
    /// between scripted alternatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            messages,
            model: model.into(),
            temperature: 0.0,
            max_tokens: 512,
            want_logprobs: false,
            seed: None,
        }
    }

    pub fn temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidInput("request has no messages".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidInput(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidInput("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub token: String,
    /// Natural log of the sampled token's probability.
    pub logprob: f64,
    /// Alternatives reported by the provider, most likely first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_logprobs: Vec<(String, f64)>,
}

impl TokenInfo {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self { token: token.into(), logprob, top_logprobs: Vec::new() }
    }

    pub fn probability(&self) -> f64 {
        self.logprob.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<TokenInfo>,
}

impl Completion {
    /// Checks that tokens concatenate to the text and carry valid logprobs.
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.tokens.is_empty() {
            return Ok(());
        }
        let joined: String = self.tokens.iter().map(|t| t.token.as_str()).collect();
        if joined != self.text {
            return Err(LlmError::Protocol(
                "token strings do not concatenate to the completion text".into(),
            ));
        }
        // written negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if let Some(bad) = self.tokens.iter().find(|t| !(t.logprob <= 0.0)) {
            return Err(LlmError::Protocol(format!(
                "token {:?} has invalid logprob {}",
                bad.token, bad.logprob
            )));
        }
        Ok(())
    }
}

/// Probability of the first generated token, `exp(tokens[0].logprob)`.
pub fn first_token_probability(completion: &Completion) -> Result<f64, LlmError> {
    completion
        .tokens
        .first()
        .map(TokenInfo::probability)
        .ok_or(LlmError::MissingLogprobs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LlmError> {
        if values.is_empty() {
            return Err(LlmError::InvalidInput("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LlmError::InvalidInput("embedding has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; 0 when either vector has zero norm.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot / denom
        }
    }
}

/// A chat-completion and embedding backend.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError>;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError>;
    /// Short label recorded in answer diagnostics.
    fn name(&self) -> &str;
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cvar: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), cvar: Condvar::new() }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cvar.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cvar.notify_one();
    }
}

/// Front door for all LLM calls: validation, concurrency cap, audit trail.
#[derive(Clone)]
pub struct LlmClient {
    provider: Arc<dyn Provider>,
    audit: Option<Arc<AuditLog>>,
    gate: Arc<Semaphore>,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("provider", &self.provider.name())
            .field("audit", &self.audit.as_ref().map(|a| a.path().to_path_buf()))
            .finish()
    }
}

impl LlmClient {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self::with_max_in_flight(provider, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_max_in_flight(provider: Arc<dyn Provider>, max_in_flight: usize) -> Self {
        Self { provider, audit: None, gate: Arc::new(Semaphore::new(max_in_flight)) }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::new(Arc::new(MockProvider::new(script)))
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(Arc::new(audit));
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let completion = {
            let _permit = self.gate.acquire();
            self.provider.complete(request)?
        };
        completion.validate()?;
        if request.want_logprobs && completion.tokens.is_empty() {
            return Err(LlmError::Protocol("logprobs were requested but not returned".into()));
        }
        if let Some(audit) = &self.audit {
            audit.append(request, &completion)?;
        }
        Ok(completion)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidInput("cannot embed empty text".into()));
        }
        let _permit = self.gate.acquire();
        self.provider.embed(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn first_token_probability_of_zero_logprob_is_one() {
        let c = Completion { text: "yes".into(), tokens: vec![TokenInfo::new("yes", 0.0)] };
        assert_eq!(first_token_probability(&c).unwrap(), 1.0);
    }

    #[test]
    fn first_token_probability_matches_exp() {
        let c = Completion { text: "no".into(), tokens: vec![TokenInfo::new("no", -0.22314355)] };
        let p = first_token_probability(&c).unwrap();
        // exp(-0.22314355) evaluated independently: 0.8 * exp(ln(1.25) - 0.22314355)
        let expected = 0.8 * ((1.25f64).ln() - 0.22314355).exp();
        assert!((p - expected).abs() < 1e-15);
        assert!((p - 0.8).abs() < 1e-8);
    }

    #[test]
    fn first_token_probability_needs_tokens() {
        let c = Completion { text: "yes".into(), tokens: vec![] };
        assert!(matches!(first_token_probability(&c), Err(LlmError::MissingLogprobs)));
    }

    #[test]
    fn request_validation() {
        let ok = CompletionRequest::new("m", vec![Message::user("hi")]);
        assert!(ok.validate().is_ok());
        assert!(CompletionRequest::new("m", vec![]).validate().is_err());
        assert!(ok.clone().temperature(-0.1).validate().is_err());
        assert!(ok.clone().temperature(f64::NAN).validate().is_err());
        assert!(ok.max_tokens(0).validate().is_err());
    }

    #[test]
    fn completion_validation_rejects_mismatched_tokens() {
        let c = Completion {
            text: "yes.".into(),
            tokens: vec![TokenInfo::new("yes", -0.1)],
        };
        assert!(matches!(c.validate(), Err(LlmError::Protocol(_))));
        let c = Completion {
            text: "yes".into(),
            tokens: vec![TokenInfo::new("yes", 0.3)],
        };
        assert!(matches!(c.validate(), Err(LlmError::Protocol(_))));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        let v = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.dimension(), 2);
        assert_eq!(v.norm(), 5.0);
    }

    struct NoLogprobs;

    impl Provider for NoLogprobs {
        fn complete(&self, _: &CompletionRequest) -> Result<Completion, LlmError> {
            Ok(Completion { text: "yes".into(), tokens: vec![] })
        }
        fn embed(&self, _: &str) -> Result<EmbeddingVector, LlmError> {
            EmbeddingVector::new(vec![1.0])
        }
        fn name(&self) -> &str {
            "no-logprobs"
        }
    }

    #[test]
    fn missing_logprobs_when_requested_is_protocol_error() {
        let client = LlmClient::new(Arc::new(NoLogprobs));
        let req = CompletionRequest::new("m", vec![Message::user("q")]);
        assert!(client.complete(&req).is_ok());
        let err = client.complete(&req.with_logprobs(true)).unwrap_err();
        assert!(matches!(err, LlmError::Protocol(_)));
    }

    struct Slow {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Provider for Slow {
        fn complete(&self, _: &CompletionRequest) -> Result<Completion, LlmError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(Completion { text: "ok".into(), tokens: vec![] })
        }
        fn embed(&self, _: &str) -> Result<EmbeddingVector, LlmError> {
            EmbeddingVector::new(vec![1.0])
        }
        fn name(&self) -> &str {
            "slow"
        }
    }

    #[test]
    fn in_flight_requests_are_capped() {
        let provider = Arc::new(Slow { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let client = LlmClient::with_max_in_flight(provider.clone(), 2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                let client = client.clone();
                s.spawn(move || {
                    client
                        .complete(&CompletionRequest::new("m", vec![Message::user("q")]))
                        .unwrap()
                });
            }
        });
        assert!(provider.peak.load(Ordering::SeqCst) <= 2);
    }
}
