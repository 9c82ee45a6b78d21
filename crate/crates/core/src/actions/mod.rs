//! Scientist-defined actions over the knowledge base.
//!
//! An action is a named function plus the description that tells the LLM
//! what it is for. Three kinds exist: CSV table lookups, subprocesses that
//! speak JSON over stdio, and cosine-similarity retrieval over documents.
//! Matching (which actions apply to a question) and execution are separate
//! phases; aggregation turns the results into synthesized evidence.

mod aggregate;
mod matching;
mod retrieval;
mod subprocess;
mod table;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::llm::{LlmClient, LlmError, Semaphore};

pub use aggregate::{aggregate, build_aggregation_prompt, SynthesizedEvidence};
pub use matching::{build_matching_prompt, match_actions, parse_selection};
pub use retrieval::{chunk_text, Chunk, RetrievalIndex};
pub use table::Table;

#[derive(Debug, thiserror::Error)]
pub enum ActionError {
    #[error("invalid action {name}: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("could not read action selection from model output: {0}")]
    UnparsableSelection(String),
    #[error("no action produced usable output: {}", .0.error_message.as_deref().unwrap_or("unknown error"))]
    AggregationImpossible(Box<ActionResult>),
    #[error("the model returned an empty answer")]
    EmptyEvidence,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn default_max_concurrent() -> usize {
    2
}

fn default_timeout() -> u64 {
    30
}

fn default_chunk_size() -> usize {
    800
}

fn default_chunk_overlap() -> usize {
    200
}

fn default_top_k() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLookup {
    /// CSV file relative to the data directory.
    pub table: String,
    /// Column matched against the argument of the same name. Without a key
    /// column the whole table is rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_column: Option<String>,
    /// Row format with `{column}` placeholders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_template: Option<String>,
    /// First line when rendering the whole table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subprocess {
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_dir: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub parameters: Vec<String>,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub documents: Vec<String>,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_chunk_overlap")]
    pub chunk_overlap: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActionKind {
    TableLookup(TableLookup),
    Subprocess(Subprocess),
    Retrieval(Retrieval),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub description: String,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl ActionSpec {
    /// Argument names the action expects.
    pub fn parameters(&self) -> Vec<String> {
        match &self.kind {
            ActionKind::TableLookup(t) => t.key_column.iter().cloned().collect(),
            ActionKind::Subprocess(s) => s.parameters.clone(),
            ActionKind::Retrieval(_) => vec!["query".into()],
        }
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        let invalid = |reason: &str| ActionError::InvalidSpec { name: self.name.clone(), reason: reason.into() };
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(invalid("name must be a non-empty identifier"));
        }
        if self.description.trim().is_empty() {
            return Err(invalid("description is empty"));
        }
        match &self.kind {
            ActionKind::TableLookup(_) => {}
            ActionKind::Subprocess(s) => {
                if s.command.is_empty() {
                    return Err(invalid("command is empty"));
                }
                if s.timeout_secs < 1 {
                    return Err(invalid("timeout must be at least 1 s"));
                }
            }
            ActionKind::Retrieval(r) => {
                if r.top_k < 1 {
                    return Err(invalid("top_k must be at least 1"));
                }
                if r.documents.is_empty() {
                    return Err(invalid("no documents"));
                }
                if r.chunk_size == 0 || r.chunk_overlap >= r.chunk_size {
                    return Err(invalid("chunk_overlap must be smaller than a non-zero chunk_size"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Ok,
    DomainError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResult {
    pub action_name: String,
    pub output_text: String,
    pub status: ActionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl ActionResult {
    pub fn ok(action: &str, output: impl Into<String>) -> Self {
        Self {
            action_name: action.into(),
            output_text: output.into(),
            status: ActionStatus::Ok,
            error_message: None,
        }
    }

    pub fn domain_error(action: &str, message: impl Into<String>) -> Self {
        Self {
            action_name: action.into(),
            output_text: String::new(),
            status: ActionStatus::DomainError,
            error_message: Some(message.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ActionStatus::Ok
    }
}

/// A selected action together with the arguments extracted for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCall {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl ActionCall {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), args: BTreeMap::new() }
    }

    pub fn arg(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.args.insert(key.into(), value.into());
        self
    }
}

/// One prior exchange included as conversational context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub query: String,
    pub answer: String,
}

/// Parameters of an LLM call made by matching or aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self { model: "gpt-4-0125-preview".into(), temperature: 0.0, max_tokens: 1024, seed: None }
    }
}

pub(crate) fn render_context(context: &[ContextTurn]) -> String {
    let mut out = String::new();
    for turn in context {
        out.push_str("User: ");
        out.push_str(&turn.query);
        out.push_str("\nAssistant: ");
        out.push_str(&turn.answer);
        out.push('\n');
    }
    out
}

enum Backend {
    Table(Table),
    Subprocess { program: PathBuf, cwd: PathBuf, gate: Semaphore },
    Retrieval(RetrievalIndex),
}

/// The registered actions with their loaded assets. Immutable after load.
pub struct KnowledgeBase {
    specs: Vec<ActionSpec>,
    backends: HashMap<String, Arc<Backend>>,
    data_dir: PathBuf,
}

impl std::fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeBase")
            .field("actions", &self.specs.iter().map(|s| &s.name).collect::<Vec<_>>())
            .field("data_dir", &self.data_dir)
            .finish()
    }
}

fn read_file(path: &Path) -> Result<String, ActionError> {
    std::fs::read_to_string(path).map_err(|source| ActionError::Io { path: path.to_path_buf(), source })
}

impl KnowledgeBase {
    /// Validates every spec and loads the files it references.
    pub fn load(specs: Vec<ActionSpec>, data_dir: impl Into<PathBuf>) -> Result<Self, ActionError> {
        let data_dir = data_dir.into();
        let mut backends = HashMap::new();
        for spec in &specs {
            spec.validate()?;
            let invalid = |reason: String| ActionError::InvalidSpec { name: spec.name.clone(), reason };
            let backend = match &spec.kind {
                ActionKind::TableLookup(t) => {
                    let path = data_dir.join(&t.table);
                    let table = Table::parse(&read_file(&path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
                    if let Some(key) = &t.key_column {
                        if table.column(key).is_none() {
                            return Err(invalid(format!("table {} has no column {key:?}", t.table)));
                        }
                    }
                    if let Some(template) = &t.row_template {
                        table.check_template(template).map_err(invalid)?;
                    }
                    Backend::Table(table)
                }
                ActionKind::Subprocess(s) => {
                    let cwd = match &s.working_dir {
                        Some(dir) => data_dir.join(dir),
                        None => data_dir.clone(),
                    };
                    if !cwd.is_dir() {
                        return Err(invalid(format!("working directory {} does not exist", cwd.display())));
                    }
                    let program = PathBuf::from(&s.command[0]);
                    let program = if program.components().count() > 1 && program.is_relative() {
                        let resolved = cwd.join(&program);
                        if !resolved.exists() {
                            return Err(invalid(format!("program {} does not exist", resolved.display())));
                        }
                        resolved
                    } else {
                        program
                    };
                    Backend::Subprocess { program, cwd, gate: Semaphore::new(s.max_concurrent) }
                }
                ActionKind::Retrieval(r) => {
                    let mut docs = Vec::new();
                    for doc in &r.documents {
                        docs.push((doc.clone(), read_file(&data_dir.join(doc))?));
                    }
                    Backend::Retrieval(RetrievalIndex::new(&docs, r.chunk_size, r.chunk_overlap))
                }
            };
            if backends.insert(spec.name.clone(), Arc::new(backend)).is_some() {
                return Err(invalid("duplicate action name".into()));
            }
        }
        Ok(Self { specs, backends, data_dir })
    }

    pub fn specs(&self) -> &[ActionSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ActionSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// The chunk index of a retrieval action.
    pub fn retrieval_index(&self, name: &str) -> Option<&RetrievalIndex> {
        match self.backends.get(name).map(|b| b.as_ref()) {
            Some(Backend::Retrieval(index)) => Some(index),
            _ => None,
        }
    }

    /// Runs one action. Failures inside the knowledge base (unknown key,
    /// nonzero exit, timeout) come back as a `DomainError` result; `Err` is
    /// reserved for unknown actions and provider failures.
    pub fn execute(&self, call: &ActionCall, llm: &LlmClient) -> Result<ActionResult, ActionError> {
        let spec = self.spec(&call.name).ok_or_else(|| ActionError::UnknownAction(call.name.clone()))?;
        let backend = &self.backends[&call.name];
        match (&spec.kind, backend.as_ref()) {
            (ActionKind::TableLookup(cfg), Backend::Table(table)) => Ok(table::lookup(spec, cfg, table, &call.args)),
            (ActionKind::Subprocess(cfg), Backend::Subprocess { program, cwd, gate }) => {
                let _permit = gate.acquire();
                Ok(subprocess::run(spec, cfg, program, cwd, &call.args))
            }
            (ActionKind::Retrieval(cfg), Backend::Retrieval(index)) => {
                let Some(query) = call.args.get("query").filter(|q| !q.trim().is_empty()) else {
                    return Ok(ActionResult::domain_error(&spec.name, "Missing argument query"));
                };
                let hits = index.search(query, cfg.top_k, llm)?;
                Ok(ActionResult::ok(&spec.name, index.render(&hits)))
            }
            _ => unreachable!("backend built from the same spec"),
        }
    }
}
