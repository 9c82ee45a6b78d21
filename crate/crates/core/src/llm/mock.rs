use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AuditRecord, Completion, CompletionRequest, EmbeddingVector, LlmError, Provider, TokenInfo};

fn default_embedding_dim() -> usize {
    64
}

/// A scripted set of canned completions.
///
/// Rules are tried in order. A rule matches when its fingerprint (if any)
/// equals the request fingerprint, every `contains` needle occurs in the
/// normalized prompt, and its `seed` (if any) equals the request seed. The
/// response is `responses[seed % len]`, so sampling with different seeds
/// walks through the scripted alternatives while identical requests always
/// get identical completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<MockResponse>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self { embedding_dim: default_embedding_dim(), rules: Vec::new(), default: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub responses: Vec<MockResponse>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockResponse {
    pub text: String,
    /// Probability of the first token. Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    /// Explicit token list; overrides the built-in tokenizer and `p0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenInfo>>,
}

impl MockResponse {
    pub fn new(text: impl Into<String>, p0: f64) -> Self {
        Self { text: text.into(), p0: Some(p0), tokens: None }
    }

    fn to_completion(&self, want_logprobs: bool) -> Result<Completion, LlmError> {
        if !want_logprobs {
            return Ok(Completion { text: self.text.clone(), tokens: Vec::new() });
        }
        if let Some(tokens) = &self.tokens {
            return Ok(Completion { text: self.text.clone(), tokens: tokens.clone() });
        }
        let p0 = self.p0.unwrap_or(1.0);
        if !(p0 > 0.0 && p0 <= 1.0) {
            return Err(LlmError::Protocol(format!("mock p0 {p0} is outside (0, 1]")));
        }
        let tokens = tokenize(&self.text)
            .into_iter()
            .enumerate()
            .map(|(i, tok)| TokenInfo::new(tok, if i == 0 { p0.ln() } else { 0.0 }))
            .collect();
        Ok(Completion { text: self.text.clone(), tokens })
    }
}

impl MockRule {
    pub fn contains<I, S>(needles: I, responses: Vec<MockResponse>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            contains: needles.into_iter().map(Into::into).collect(),
            responses,
            ..Self::default()
        }
    }

    fn matches(&self, fp: &str, normalized: &str, seed: Option<u64>) -> bool {
        if let Some(want) = &self.fingerprint {
            if want != fp {
                return false;
            }
        }
        if self.seed.is_some() && self.seed != seed {
            return false;
        }
        self.contains.iter().all(|needle| normalized.contains(&normalize_text(needle)))
    }
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidInput(format!("mock script {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| LlmError::InvalidInput(format!("mock script {}: {e}", path.display())))
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Builds a script that replays every completion recorded in an audit log.
    pub fn from_audit(records: &[AuditRecord]) -> Self {
        let mut rules: Vec<MockRule> = records
            .iter()
            .map(|r| MockRule {
                fingerprint: Some(fingerprint(&r.request)),
                seed: r.request.seed,
                responses: vec![MockResponse {
                    text: r.response.text.clone(),
                    p0: None,
                    tokens: Some(r.response.tokens.clone()),
                }],
                ..MockRule::default()
            })
            .collect();
        // an unseeded rule matches any seed, so seeded ones must win
        rules.sort_by_key(|r| r.seed.is_none());
        Self { embedding_dim: default_embedding_dim(), rules, default: None }
    }
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Lowercased, whitespace-collapsed rendering of all messages.
pub fn normalize_prompt(request: &CompletionRequest) -> String {
    request
        .messages
        .iter()
        .map(|m| format!("{}: {}", m.role, normalize_text(&m.content)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Hex SHA-256 of the normalized prompt.
pub fn fingerprint(request: &CompletionRequest) -> String {
    hex::encode(Sha256::digest(normalize_prompt(request).as_bytes()))
}

/// Splits text into word-like pieces whose concatenation is the text.
///
/// Each piece is optional leading whitespace followed by either a run of
/// alphanumerics or a single other character.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i < chars.len() {
            if chars[i].is_alphanumeric() {
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        out.push(chars[start..i].iter().collect());
    }
    out
}

fn seeded_rng(label: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(label.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Deterministic provider driven by a [`MockScript`].
#[derive(Debug, Clone)]
pub struct MockProvider {
    script: MockScript,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let normalized = normalize_prompt(request);
        let fp = hex::encode(Sha256::digest(normalized.as_bytes()));
        let response = match self
            .script
            .rules
            .iter()
            .find(|r| !r.responses.is_empty() && r.matches(&fp, &normalized, request.seed))
        {
            Some(rule) => {
                let idx = request.seed.unwrap_or(0) as usize % rule.responses.len();
                &rule.responses[idx]
            }
            None => self.script.default.as_ref().ok_or_else(|| {
                LlmError::Protocol(format!("mock script has no rule for prompt fingerprint {fp}"))
            })?,
        };
        response.to_completion(request.want_logprobs)
    }

    /// Sum of per-word hash-seeded Gaussian vectors, normalized to unit length.
    /// Texts sharing vocabulary land close together.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidInput("cannot embed empty text".into()));
        }
        let dim = self.script.embedding_dim.max(1);
        let mut acc = vec![0.0f64; dim];
        let lower = text.to_lowercase();
        let mut words = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .peekable();
        let mut add = |label: String| {
            let mut rng = seeded_rng(&label);
            for v in acc.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v += x;
            }
        };
        if words.peek().is_none() {
            add(format!("text:{text}"));
        } else {
            for w in words {
                add(format!("word:{w}"));
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(acc)
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{first_token_probability, Message};
    use proptest::prelude::*;

    fn req(text: &str) -> CompletionRequest {
        CompletionRequest::new("mock-model", vec![Message::user(text)]).with_logprobs(true)
    }

    #[test]
    fn scripted_yes_carries_first_logprob() {
        let script = MockScript::default()
            .with_rule(MockRule::contains(["comply"], vec![MockResponse::new("yes.", 0.9)]));
        let mock = MockProvider::new(script);
        let c = mock.complete(&req("Does it comply?")).unwrap();
        assert_eq!(c.text, "yes.");
        assert_eq!(c.tokens[0].token, "yes");
        assert!((c.tokens[0].logprob - 0.9f64.ln()).abs() < 1e-15);
        assert!((first_token_probability(&c).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn no_logprobs_gives_empty_tokens() {
        let script = MockScript::default()
            .with_rule(MockRule::contains(Vec::<String>::new(), vec![MockResponse::new("text", 0.5)]));
        let mock = MockProvider::new(script);
        let c = mock.complete(&req("q").with_logprobs(false)).unwrap();
        assert!(c.tokens.is_empty());
        assert_eq!(c.text, "text");
    }

    #[test]
    fn unmatched_prompt_without_default_is_protocol_error() {
        let mock = MockProvider::new(MockScript::default());
        assert!(matches!(mock.complete(&req("q")), Err(LlmError::Protocol(_))));
    }

    #[test]
    fn matching_ignores_case_and_spacing() {
        let script = MockScript::default().with_rule(MockRule::contains(
            ["Question:  When should"],
            vec![MockResponse::new("ok", 1.0)],
        ));
        let mock = MockProvider::new(script);
        assert!(mock.complete(&req("question: when\n should we")).is_ok());
    }

    #[test]
    fn seed_selects_alternative() {
        let script = MockScript::default().with_rule(MockRule::contains(
            ["q"],
            vec![MockResponse::new("a", 0.9), MockResponse::new("b", 0.4)],
        ));
        let mock = MockProvider::new(script);
        let texts: Vec<_> = (0..4)
            .map(|s| mock.complete(&req("q").seed(Some(s))).unwrap().text)
            .collect();
        assert_eq!(texts, ["a", "b", "a", "b"]);
    }

    #[test]
    fn fingerprint_is_normalized() {
        assert_eq!(fingerprint(&req("Hello   World")), fingerprint(&req("hello world")));
        assert_ne!(fingerprint(&req("hello")), fingerprint(&req("world")));
    }

    #[test]
    fn embed_is_deterministic_unit_and_seeded() {
        let mock = MockProvider::new(MockScript { embedding_dim: 32, ..Default::default() });
        let a1 = mock.embed("a").unwrap();
        let a2 = mock.embed("a").unwrap();
        let b = mock.embed("b").unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_eq!(a1.dimension(), 32);
        assert!((a1.norm() - 1.0).abs() < 1e-12);
        assert!(mock.embed("").is_err());
        assert!(mock.embed("...").is_ok());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("yes. Belugas are"), ["yes", ".", " Belugas", " are"]);
        assert_eq!(tokenize(" no"), [" no"]);
        assert_eq!(tokenize("a "), ["a", " "]);
        assert!(tokenize("").is_empty());
    }

    proptest! {
        #[test]
        fn tokens_concatenate_to_text(text in "\\PC{0,60}") {
            let joined: String = tokenize(&text).concat();
            prop_assert_eq!(joined, text);
        }

        #[test]
        fn mock_is_deterministic(text in "[a-z ]{1,40}", seed in proptest::option::of(0u64..10)) {
            let script = MockScript {
                default: Some(MockResponse::new("yes. fine", 0.7)),
                ..Default::default()
            };
            let mock = MockProvider::new(script);
            let r = req(&text).seed(seed);
            prop_assert_eq!(mock.complete(&r).unwrap(), mock.complete(&r).unwrap());
        }
    }
}
