use serde::{Deserialize, Serialize};

use super::{render_context, ActionError, ActionResult, ActionSpec, ContextTurn, PromptSettings};
use crate::llm::{CompletionRequest, LlmClient, Message};

const SYNTHESIS_SYSTEM: &str =
    "You answer questions for policymakers using only the results of the knowledge-base actions you are given.";

/// The aggregated answer and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedEvidence {
    pub text: String,
    pub actions_used: Vec<String>,
    pub action_results: Vec<ActionResult>,
    pub query: String,
}

pub fn build_aggregation_prompt(
    query: &str,
    results: &[ActionResult],
    specs: &[ActionSpec],
    context: &[ContextTurn],
) -> String {
    let mut p = String::from(
        "Answer the question using only the action results below. Each result follows the description of the action that produced it.\n",
    );
    if !context.is_empty() {
        p.push_str("\nConversation so far:\n");
        p.push_str(&render_context(context));
    }
    p.push_str("\nQuestion: ");
    p.push_str(query);
    p.push('\n');
    for r in results {
        let description = specs.iter().find(|s| s.name == r.action_name).map(|s| s.description.as_str()).unwrap_or("");
        p.push_str(&format!("\nAction: {}\nDescription: {}\n", r.action_name, description));
        if r.is_ok() {
            p.push_str("Result:\n");
            p.push_str(&r.output_text);
        } else {
            p.push_str("Error: ");
            p.push_str(r.error_message.as_deref().unwrap_or(""));
        }
        p.push('\n');
    }
    p.push_str("\nAnswer:");
    p
}

/// Synthesizes evidence from action results. The model's answer is
/// returned verbatim.
pub fn aggregate(
    query: &str,
    results: &[ActionResult],
    specs: &[ActionSpec],
    context: &[ContextTurn],
    llm: &LlmClient,
    settings: &PromptSettings,
) -> Result<SynthesizedEvidence, ActionError> {
    if !results.iter().any(ActionResult::is_ok) {
        let first = results
            .iter()
            .find(|r| !r.is_ok())
            .cloned()
            .unwrap_or_else(|| ActionResult::domain_error("", "no action results"));
        return Err(ActionError::AggregationImpossible(Box::new(first)));
    }
    let request = CompletionRequest::new(
        settings.model.clone(),
        vec![Message::system(SYNTHESIS_SYSTEM), Message::user(build_aggregation_prompt(query, results, specs, context))],
    )
    .temperature(settings.temperature)
    .max_tokens(settings.max_tokens)
    .seed(settings.seed);
    let completion = llm.complete(&request)?;
    if completion.text.trim().is_empty() {
        return Err(ActionError::EmptyEvidence);
    }
    let mut actions_used: Vec<String> = Vec::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        if !actions_used.contains(&r.action_name) {
            actions_used.push(r.action_name.clone());
        }
    }
    Ok(SynthesizedEvidence {
        text: completion.text,
        actions_used,
        action_results: results.to_vec(),
        query: query.to_string(),
    })
}
