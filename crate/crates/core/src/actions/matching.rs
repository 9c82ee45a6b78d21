use serde_json::Value;
use tracing::warn;

use super::{render_context, ActionCall, ActionError, ActionSpec, ContextTurn, PromptSettings};
use crate::llm::{CompletionRequest, LlmClient, Message};

const MATCH_SYSTEM: &str = "You select which knowledge-base actions can answer a user's question.";

pub fn build_matching_prompt(query: &str, actions: &[ActionSpec], context: &[ContextTurn]) -> String {
    let mut p = String::from(
        "Select the actions needed to answer the question. Only select an action when its description \
         shows that its output helps answer the question. If no action applies, select none.\n\nActions:\n",
    );
    for a in actions {
        let params = a.parameters();
        if params.is_empty() {
            p.push_str(&format!("- {}: {}\n", a.name, a.description));
        } else {
            p.push_str(&format!("- {} (arguments: {}): {}\n", a.name, params.join(", "), a.description));
        }
    }
    if !context.is_empty() {
        p.push_str("\nConversation so far:\n");
        p.push_str(&render_context(context));
    }
    p.push_str("\nQuestion: ");
    p.push_str(query);
    p.push_str(
        "\n\nReply with JSON only: {\"actions\": [{\"name\": \"<action name>\", \"args\": {\"<argument>\": \"<value>\"}}]}. \
         Reply {\"actions\": []} when no action applies.",
    );
    p
}

fn json_payload(text: &str) -> Option<Value> {
    let start = text.find(['{', '['])?;
    let end = text.rfind(['}', ']'])?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

fn arg_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads the model's action selection. Unknown names are dropped.
pub fn parse_selection(text: &str, actions: &[ActionSpec]) -> Result<Vec<ActionCall>, ActionError> {
    let payload = json_payload(text).ok_or_else(|| ActionError::UnparsableSelection(text.to_string()))?;
    let items = match &payload {
        Value::Object(map) => map
            .get("actions")
            .and_then(Value::as_array)
            .ok_or_else(|| ActionError::UnparsableSelection(text.to_string()))?,
        Value::Array(items) => items,
        _ => return Err(ActionError::UnparsableSelection(text.to_string())),
    };
    let mut calls: Vec<ActionCall> = Vec::new();
    for item in items {
        let call = match item {
            Value::String(name) => ActionCall::new(name.clone()),
            Value::Object(obj) => {
                let Some(name) = obj.get("name").and_then(Value::as_str) else {
                    return Err(ActionError::UnparsableSelection(text.to_string()));
                };
                let mut call = ActionCall::new(name);
                if let Some(Value::Object(args)) = obj.get("args").or_else(|| obj.get("arguments")) {
                    for (k, v) in args {
                        call.args.insert(k.clone(), arg_string(v));
                    }
                }
                call
            }
            _ => return Err(ActionError::UnparsableSelection(text.to_string())),
        };
        if !actions.iter().any(|a| a.name == call.name) {
            warn!(action = %call.name, "model selected an unknown action; dropping it");
            continue;
        }
        if !calls.contains(&call) {
            calls.push(call);
        }
    }
    Ok(calls)
}

/// Asks the LLM which actions are relevant to `query`. An empty selection
/// means the question is out of scope. Nothing is executed here.
pub fn match_actions(
    query: &str,
    actions: &[ActionSpec],
    context: &[ContextTurn],
    llm: &LlmClient,
    settings: &PromptSettings,
) -> Result<Vec<ActionCall>, ActionError> {
    if actions.is_empty() {
        return Ok(Vec::new());
    }
    let request = CompletionRequest::new(
        settings.model.clone(),
        vec![Message::system(MATCH_SYSTEM), Message::user(build_matching_prompt(query, actions, context))],
    )
    .temperature(0.0)
    .max_tokens(settings.max_tokens)
    .seed(settings.seed);
    let completion = llm.complete(&request)?;
    parse_selection(&completion.text, actions)
}
