//! One user turn, end to end: match actions, execute them, aggregate the
//! results into evidence, check the evidence against the guidelines.
//!
//! Every turn ends in exactly one [`CheckClass`]. Nothing is thrown back to
//! the caller; provider failures become `error` answers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::actions::{
    aggregate, match_actions, ActionCall, ActionError, ActionKind, ContextTurn, KnowledgeBase, PromptSettings,
    SynthesizedEvidence,
};
use crate::config::{BumperConfig, ConfigError, ProviderKind};
use crate::guidelines::{run_check, CheckSettings, CheckVariant, ComplianceOutcome, Verdict};
use crate::llm::{AuditLog, LlmClient, MockScript, OpenAiConfig, OpenAiProvider, Provider};

/// Message returned when no action matches the question.
pub const NO_TOOLS_FOUND: &str = "No tools found";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Actions(#[from] ActionError),
    #[error("provider setup: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckClass {
    Error,
    OutOfScope,
    CheckFlag,
    CheckFail,
}

impl fmt::Display for CheckClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckClass::Error => "error",
            CheckClass::OutOfScope => "out_of_scope",
            CheckClass::CheckFlag => "check_flag",
            CheckClass::CheckFail => "check_fail",
        })
    }
}

/// Where a turn stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    DomainError(String),
    NoMatch,
    Checked(ComplianceOutcome),
}

pub fn classify_check(stage: &StageOutcome) -> CheckClass {
    match stage {
        StageOutcome::DomainError(_) => CheckClass::Error,
        StageOutcome::NoMatch => CheckClass::OutOfScope,
        StageOutcome::Checked(o) if o.verdict == Verdict::Pass && !o.unparsable => CheckClass::CheckFlag,
        StageOutcome::Checked(_) => CheckClass::CheckFail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumperAnswer {
    pub evidence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ComplianceOutcome>,
    pub check_class: CheckClass,
    #[serde(default)]
    pub actions_used: Vec<String>,
    /// Deterministic run metadata (provider, models, notes). Wall-clock
    /// timings live on the [`Turn`].
    #[serde(default)]
    pub diagnostics: BTreeMap<String, String>,
}

impl BumperAnswer {
    fn halted(class: CheckClass, message: impl Into<String>, diagnostics: BTreeMap<String, String>) -> Self {
        Self { evidence: message.into(), outcome: None, check_class: class, actions_used: Vec::new(), diagnostics }
    }

    pub fn verdict(&self) -> Option<Verdict> {
        self.outcome.as_ref().map(|o| o.verdict)
    }

    pub fn score(&self) -> Option<f64> {
        self.outcome.as_ref().map(|o| o.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub answer: BumperAnswer,
    pub asked_at: DateTime<Utc>,
    pub answered_at: DateTime<Utc>,
}

/// An append-only conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thread {
    pub id: Uuid,
    pub created_at: DateTime<Utc>,
    turns: Vec<Turn>,
}

impl Default for Thread {
    fn default() -> Self {
        Self::new()
    }
}

impl Thread {
    pub fn new() -> Self {
        Self { id: Uuid::new_v4(), created_at: Utc::now(), turns: Vec::new() }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn push(&mut self, turn: Turn) {
        self.turns.push(turn);
    }

    /// The last `n` turns as prompt context.
    pub fn context(&self, n: usize) -> Vec<ContextTurn> {
        let start = self.turns.len().saturating_sub(n);
        self.turns[start..]
            .iter()
            .map(|t| ContextTurn { query: t.query.clone(), answer: t.answer.evidence.clone() })
            .collect()
    }
}

/// Per-call overrides for synthesis and checking.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AskOptions {
    pub variant: Option<CheckVariant>,
    pub synthesis_temperature: Option<f64>,
    pub synthesis_seed: Option<u64>,
    pub check_seed: Option<u64>,
}

/// A configured knowledge base with its LLM client.
#[derive(Debug)]
pub struct Bumper {
    config: BumperConfig,
    kb: KnowledgeBase,
    llm: LlmClient,
}

fn build_provider(config: &BumperConfig, mock_override: Option<&Path>) -> Result<Arc<dyn Provider>, PipelineError> {
    let mock_path = match (mock_override, config.provider.kind) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, ProviderKind::Mock) => config.provider.mock_script.as_deref().map(|p| config.resolve(p)),
        (None, ProviderKind::Openai) => None,
    };
    if let Some(path) = mock_path {
        let script = MockScript::load(&path).map_err(|e| PipelineError::Provider(e.to_string()))?;
        return Ok(Arc::new(crate::llm::MockProvider::new(script)));
    }
    let mut oa = OpenAiConfig { embedding_model: config.provider.embedding_model.clone(), ..Default::default() };
    if let Some(url) = &config.provider.base_url {
        oa.base_url = url.clone();
    }
    oa = oa.from_env();
    if let Ok(key) = std::env::var(&config.provider.api_key_env) {
        if !key.is_empty() {
            oa.api_key = Some(key);
        }
    }
    Ok(Arc::new(OpenAiProvider::new(oa)))
}

impl Bumper {
    pub fn new(config: BumperConfig, llm: LlmClient) -> Result<Self, PipelineError> {
        config.validate()?;
        let kb = KnowledgeBase::load(config.actions.clone(), config.data_path())?;
        Ok(Self { config, kb, llm })
    }

    /// Builds the provider named in the config, or the mock script at
    /// `mock_override` when given.
    pub fn from_config(config: BumperConfig, mock_override: Option<&Path>) -> Result<Self, PipelineError> {
        let provider = build_provider(&config, mock_override)?;
        let mut llm = LlmClient::with_max_in_flight(provider, config.provider.max_in_flight);
        if let Some(audit) = &config.provider.audit_log {
            let log = AuditLog::open(config.resolve(audit)).map_err(|e| PipelineError::Provider(e.to_string()))?;
            llm = llm.with_audit(log);
        }
        Self::new(config, llm)
    }

    pub fn load(path: impl AsRef<Path>, mock_override: Option<&Path>) -> Result<Self, PipelineError> {
        Self::from_config(BumperConfig::load(path)?, mock_override)
    }

    pub fn config(&self) -> &BumperConfig {
        &self.config
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn llm(&self) -> &LlmClient {
        &self.llm
    }

    fn base_diagnostics(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("provider".to_string(), self.llm.provider_name().to_string()),
            ("model".to_string(), self.config.provider.model.clone()),
        ])
    }

    fn prompt_settings(&self, temperature: f64, seed: Option<u64>) -> PromptSettings {
        PromptSettings {
            model: self.config.provider.model.clone(),
            temperature,
            max_tokens: self.config.synthesis.max_tokens,
            seed,
        }
    }

    /// Steps 1-3: match, execute, aggregate. `Err` carries the class and
    /// message of a turn that cannot produce evidence.
    pub fn synthesize(
        &self,
        context: &[ContextTurn],
        query: &str,
        temperature: f64,
        seed: Option<u64>,
    ) -> Result<SynthesizedEvidence, (CheckClass, String)> {
        let error = |e: ActionError| (CheckClass::Error, e.to_string());
        let specs = self.kb.specs();
        let calls = match_actions(query, specs, context, &self.llm, &self.prompt_settings(0.0, seed)).map_err(error)?;
        if calls.is_empty() {
            return Err((CheckClass::OutOfScope, NO_TOOLS_FOUND.to_string()));
        }
        let mut results = Vec::with_capacity(calls.len());
        for call in calls {
            let call = self.fill_retrieval_query(call, query);
            results.push(self.kb.execute(&call, &self.llm).map_err(error)?);
        }
        match aggregate(query, &results, specs, context, &self.llm, &self.prompt_settings(temperature, seed)) {
            Ok(evidence) => Ok(evidence),
            Err(ActionError::AggregationImpossible(first)) => Err((
                CheckClass::Error,
                first.error_message.clone().unwrap_or_else(|| "action failed".into()),
            )),
            Err(e) => Err(error(e)),
        }
    }

    fn fill_retrieval_query(&self, mut call: ActionCall, query: &str) -> ActionCall {
        if let Some(spec) = self.kb.spec(&call.name) {
            if matches!(spec.kind, ActionKind::Retrieval(_)) && !call.args.contains_key("query") {
                call.args.insert("query".into(), query.to_string());
            }
        }
        call
    }

    pub fn check_settings(&self, seed: Option<u64>) -> CheckSettings {
        CheckSettings {
            model: self.config.provider.model.clone(),
            temperature: self.config.check.temperature,
            seed,
            ..CheckSettings::default()
        }
    }

    /// Answers `query` given prior context without touching any thread.
    pub fn answer(&self, context: &[ContextTurn], query: &str, options: AskOptions) -> BumperAnswer {
        let mut diagnostics = self.base_diagnostics();
        if query.trim().is_empty() {
            return BumperAnswer::halted(CheckClass::Error, "query is empty", diagnostics);
        }
        let variant = options.variant.unwrap_or_else(|| self.config.check.variant());
        diagnostics.insert("variant".into(), variant.to_string());

        let temperature = options.synthesis_temperature.unwrap_or(self.config.synthesis.temperature);
        let evidence = match self.synthesize(context, query, temperature, options.synthesis_seed) {
            Ok(e) => e,
            Err((class, message)) => return BumperAnswer::halted(class, message, diagnostics),
        };

        let record = match run_check(
            &self.config.guidelines,
            &evidence.text,
            variant,
            &self.llm,
            &self.check_settings(options.check_seed),
        ) {
            Ok(r) => r,
            Err(e) => {
                diagnostics.insert("unchecked_evidence".into(), evidence.text);
                return BumperAnswer::halted(CheckClass::Error, format!("guideline check failed: {e}"), diagnostics);
            }
        };
        if record.outcome.unparsable {
            diagnostics.insert("note".into(), "unparsable verdict".into());
        }
        let stage = StageOutcome::Checked(record.outcome);
        let check_class = classify_check(&stage);
        let StageOutcome::Checked(outcome) = stage else { unreachable!() };
        BumperAnswer {
            evidence: record.evidence,
            outcome: Some(outcome),
            check_class,
            actions_used: evidence.actions_used,
            diagnostics,
        }
    }

    /// Answers `query` in the context of `thread` and appends the turn.
    pub fn ask(&self, thread: &mut Thread, query: &str) -> BumperAnswer {
        self.ask_with(thread, query, AskOptions::default())
    }

    pub fn ask_with(&self, thread: &mut Thread, query: &str, options: AskOptions) -> BumperAnswer {
        let asked_at = Utc::now();
        let context = thread.context(self.config.synthesis.context_turns);
        let answer = self.answer(&context, query, options);
        thread.push(Turn { query: query.to_string(), answer: answer.clone(), asked_at, answered_at: Utc::now() });
        answer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidelines::Granularity;

    fn outcome(verdict: Verdict, score: f64) -> ComplianceOutcome {
        ComplianceOutcome {
            verdict,
            score,
            explanation: None,
            variant: CheckVariant::new(Granularity::Whole, false),
            element_probes: None,
            unparsable: false,
        }
    }

    #[test]
    fn classification_table() {
        assert_eq!(classify_check(&StageOutcome::DomainError("No data for Antarctica".into())), CheckClass::Error);
        assert_eq!(classify_check(&StageOutcome::NoMatch), CheckClass::OutOfScope);
        assert_eq!(classify_check(&StageOutcome::Checked(outcome(Verdict::Pass, 0.807))), CheckClass::CheckFlag);
        assert_eq!(classify_check(&StageOutcome::Checked(outcome(Verdict::Fail, 0.97))), CheckClass::CheckFail);
        let mut unparsable = outcome(Verdict::Fail, 0.0);
        unparsable.unparsable = true;
        assert_eq!(classify_check(&StageOutcome::Checked(unparsable)), CheckClass::CheckFail);
    }

    #[test]
    fn class_serializes_snake_case() {
        assert_eq!(serde_json::to_string(&CheckClass::OutOfScope).unwrap(), "\"out_of_scope\"");
        assert_eq!(CheckClass::CheckFlag.to_string(), "check_flag");
    }

    #[test]
    fn context_window_keeps_last_turns() {
        let mut t = Thread::new();
        for i in 0..10 {
            t.push(Turn {
                query: format!("q{i}"),
                answer: BumperAnswer::halted(CheckClass::OutOfScope, NO_TOOLS_FOUND, BTreeMap::new()),
                asked_at: Utc::now(),
                answered_at: Utc::now(),
            });
        }
        let ctx = t.context(8);
        assert_eq!(ctx.len(), 8);
        assert_eq!(ctx[0].query, "q2");
        assert!(t.context(0).is_empty());
    }
}
