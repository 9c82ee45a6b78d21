//! Guardrails for LLM-synthesized policy evidence.
//!
//! A [`Bumper`] answers a question by selecting knowledge actions, running
//! them, aggregating their results into evidence, and checking that evidence
//! against natural-language guidelines with a token-probability score.

pub mod actions;
pub mod config;
pub mod fixtures;
pub mod guidelines;
pub mod llm;
pub mod pipeline;
pub mod session;
pub mod stability;

pub use actions::{ActionCall, ActionResult, ActionSpec, ActionStatus, KnowledgeBase};
pub use config::BumperConfig;
pub use guidelines::{
    compliance_score_elements, parse_verdict, render_check_prompt, CheckVariant, ComplianceOutcome, Granularity,
    Guidelines, Verdict,
};
pub use llm::{EmbeddingVector, LlmClient};
pub use pipeline::{AskOptions, Bumper, BumperAnswer, CheckClass, Thread, Turn};
pub use session::{SessionRecord, SessionStore};
pub use stability::{ClusterReport, ScoreSamples};
