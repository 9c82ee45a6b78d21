//! Guideline checks and the compliance score.
//!
//! A check asks an LLM whether a piece of synthesized evidence complies with
//! the scientist's guidelines, either all at once (`Granularity::Whole`) or
//! one prompt per criterion and per topic (`Granularity::PerElement`). The
//! probability of the first generated token is the confidence signal:
//!
//! * whole: `S = P0` of the generated verdict token;
//! * per element: `S = prod_i p(c_i) * (1 - prod_j (1 - p(t_j)))`, where
//!   `p` is the probability that the element is complied with (`P0` for a
//!   "yes", `1 - P0` for a "no").
//!
//! The evidence is never modified; [`run_check`] hands it back untouched
//! next to the outcome.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::llm::{first_token_probability, Completion, CompletionRequest, LlmClient, LlmError, Message};

pub const TEMPLATE_WHOLE: &str = include_str!("../templates/whole.txt");
pub const TEMPLATE_WHOLE_EXPLAIN: &str = include_str!("../templates/whole_explain.txt");
pub const TEMPLATE_CRITERION: &str = include_str!("../templates/criterion.txt");
pub const TEMPLATE_CRITERION_EXPLAIN: &str = include_str!("../templates/criterion_explain.txt");
pub const TEMPLATE_TOPIC: &str = include_str!("../templates/topic.txt");
pub const TEMPLATE_TOPIC_EXPLAIN: &str = include_str!("../templates/topic_explain.txt");

#[derive(Debug, thiserror::Error)]
pub enum GuidelineError {
    #[error("invalid guidelines: {0}")]
    InvalidGuidelines(String),
    #[error("evidence is empty")]
    EmptyEvidence,
    #[error("unparsable verdict: first token {0:?} is neither yes nor no")]
    UnparsableVerdict(String),
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("at least one topic probability is required")]
    NoTopics,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidelines {
    #[serde(default)]
    pub criteria: Vec<String>,
    pub topics: Vec<String>,
}

impl Guidelines {
    pub fn new<C, T>(criteria: C, topics: T) -> Result<Self, GuidelineError>
    where
        C: IntoIterator,
        C::Item: Into<String>,
        T: IntoIterator,
        T::Item: Into<String>,
    {
        let g = Self {
            criteria: criteria.into_iter().map(Into::into).collect(),
            topics: topics.into_iter().map(Into::into).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GuidelineError> {
        if self.topics.is_empty() {
            return Err(GuidelineError::InvalidGuidelines("topic list is empty".into()));
        }
        for entry in self.criteria.iter().chain(&self.topics) {
            if entry.trim().is_empty() {
                return Err(GuidelineError::InvalidGuidelines("empty guideline entry".into()));
            }
            if entry.contains('\n') || entry.contains('\r') {
                return Err(GuidelineError::InvalidGuidelines(format!(
                    "guideline entry spans several lines: {entry:?}"
                )));
            }
        }
        Ok(())
    }

    /// The `{G}` block: criteria then topics, one `- ` bullet per entry.
    pub fn render(&self) -> String {
        let mut out = String::from("Criteria:\n");
        for c in &self.criteria {
            out.push_str("- ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("Topics:");
        for t in &self.topics {
            out.push_str("\n- ");
            out.push_str(t);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Whole,
    PerElement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CheckVariant {
    pub granularity: Granularity,
    pub with_explanation: bool,
}

impl Default for CheckVariant {
    fn default() -> Self {
        Self { granularity: Granularity::PerElement, with_explanation: true }
    }
}

impl CheckVariant {
    pub const ALL: [CheckVariant; 4] = [
        CheckVariant { granularity: Granularity::Whole, with_explanation: false },
        CheckVariant { granularity: Granularity::Whole, with_explanation: true },
        CheckVariant { granularity: Granularity::PerElement, with_explanation: false },
        CheckVariant { granularity: Granularity::PerElement, with_explanation: true },
    ];

    pub fn new(granularity: Granularity, with_explanation: bool) -> Self {
        Self { granularity, with_explanation }
    }
}

impl fmt::Display for CheckVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.granularity {
            Granularity::Whole => "whole",
            Granularity::PerElement => "per-element",
        };
        if self.with_explanation {
            write!(f, "{base}-explain")
        } else {
            f.write_str(base)
        }
    }
}

impl FromStr for CheckVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        let (base, explain) = match s.strip_suffix("-explain") {
            Some(base) => (base, true),
            None => (s.as_str(), false),
        };
        let granularity = match base {
            "whole" => Granularity::Whole,
            "per-element" | "element" => Granularity::PerElement,
            _ => {
                return Err(format!(
                    "unknown check variant {s:?} (expected whole, whole-explain, per-element or per-element-explain)"
                ))
            }
        };
        Ok(Self { granularity, with_explanation: explain })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Criterion,
    Topic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementProbe {
    pub kind: ElementKind,
    pub element: String,
    pub verdict: Verdict,
    /// Probability that the element is complied with.
    pub affirmative_probability: f64,
    /// Probability of the token actually generated.
    pub raw_probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparsable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceOutcome {
    pub verdict: Verdict,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub variant: CheckVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_probes: Option<Vec<ElementProbe>>,
    /// Set when at least one verdict could not be read as yes/no.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unparsable: bool,
}

/// The check output together with the evidence it was run against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub evidence: String,
    pub outcome: ComplianceOutcome,
}

/// A parsed yes/no answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictProbe {
    pub verdict: Verdict,
    pub affirmative_probability: f64,
    /// `P0` of the generated token, whatever it was.
    pub raw_probability: f64,
    /// Text following the verdict token, trimmed.
    pub explanation: String,
}

fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'outer: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (key, value) in vars {
            if let Some(after) = tail.strip_prefix(key) {
                out.push_str(value);
                rest = after;
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// Renders the check prompts for a variant.
///
/// Whole checks produce one prompt; per-element checks produce one per
/// criterion followed by one per topic.
pub fn render_check_prompt(
    guidelines: &Guidelines,
    evidence: &str,
    variant: CheckVariant,
) -> Result<Vec<String>, GuidelineError> {
    if evidence.is_empty() {
        return Err(GuidelineError::EmptyEvidence);
    }
    Ok(match variant.granularity {
        Granularity::Whole => {
            let template = if variant.with_explanation { TEMPLATE_WHOLE_EXPLAIN } else { TEMPLATE_WHOLE };
            let g = guidelines.render();
            vec![substitute(template, &[("{G}", &g), ("{E}", evidence)])]
        }
        Granularity::PerElement => {
            let (ct, tt) = if variant.with_explanation {
                (TEMPLATE_CRITERION_EXPLAIN, TEMPLATE_TOPIC_EXPLAIN)
            } else {
                (TEMPLATE_CRITERION, TEMPLATE_TOPIC)
            };
            let criteria = guidelines
                .criteria
                .iter()
                .map(|c| substitute(ct, &[("{c_i}", c), ("{E}", evidence)]));
            let topics = guidelines
                .topics
                .iter()
                .map(|t| substitute(tt, &[("{t_i}", t), ("{E}", evidence)]));
            criteria.chain(topics).collect()
        }
    })
}

fn normalize_verdict_token(token: &str) -> String {
    token
        .trim_start()
        .to_lowercase()
        .trim_end_matches(['.', ',', '!'])
        .to_string()
}

/// Reads the verdict from the first token of a check completion.
pub fn parse_verdict(completion: &Completion) -> Result<VerdictProbe, GuidelineError> {
    let first = completion.tokens.first().ok_or(LlmError::MissingLogprobs)?;
    let p0 = first_token_probability(completion)?;
    let explanation = completion
        .text
        .strip_prefix(first.token.as_str())
        .unwrap_or(&completion.text)
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | '!' | ':' | ';' | '-'))
        .trim_end()
        .to_string();
    match normalize_verdict_token(&first.token).as_str() {
        "yes" => Ok(VerdictProbe {
            verdict: Verdict::Pass,
            affirmative_probability: p0,
            raw_probability: p0,
            explanation,
        }),
        "no" => Ok(VerdictProbe {
            verdict: Verdict::Fail,
            affirmative_probability: 1.0 - p0,
            raw_probability: p0,
            explanation,
        }),
        _ => Err(GuidelineError::UnparsableVerdict(first.token.clone())),
    }
}

fn check_probability(p: f64) -> Result<f64, GuidelineError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(GuidelineError::InvalidProbability(p))
    }
}

/// Whole-guideline score: the raw probability of the generated verdict token.
pub fn compliance_score_whole(verdict: Verdict, raw_p0: f64) -> Result<(Verdict, f64), GuidelineError> {
    Ok((verdict, check_probability(raw_p0)?))
}

/// Combines per-element affirmative probabilities:
/// all criteria must hold, at least one topic must apply.
pub fn compliance_score_elements(criterion_probs: &[f64], topic_probs: &[f64]) -> Result<f64, GuidelineError> {
    if topic_probs.is_empty() {
        return Err(GuidelineError::NoTopics);
    }
    let mut criteria = 1.0;
    for &p in criterion_probs {
        criteria *= check_probability(p)?;
    }
    let mut none_apply = 1.0;
    for &p in topic_probs {
        none_apply *= 1.0 - check_probability(p)?;
    }
    Ok((criteria * (1.0 - none_apply)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub model: String,
    pub temperature: f64,
    /// Token budget when no explanation is requested.
    pub max_tokens: u32,
    pub max_tokens_explained: u32,
    pub seed: Option<u64>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4-0125-preview".into(),
            temperature: 0.0,
            max_tokens: 8,
            max_tokens_explained: 256,
            seed: None,
        }
    }
}

fn ask_verdict(llm: &LlmClient, prompt: String, variant: CheckVariant, settings: &CheckSettings) -> Result<Completion, LlmError> {
    let max_tokens = if variant.with_explanation { settings.max_tokens_explained } else { settings.max_tokens };
    let request = CompletionRequest::new(settings.model.clone(), vec![Message::user(prompt)])
        .temperature(settings.temperature)
        .max_tokens(max_tokens)
        .with_logprobs(true)
        .seed(settings.seed);
    llm.complete(&request)
}

/// Runs the guideline check on `evidence` and scores it.
///
/// Provider failures propagate. A verdict that is neither yes nor no does
/// not abort the check; it marks the outcome `unparsable`, counts as a fail
/// and contributes probability 0.
pub fn run_check(
    guidelines: &Guidelines,
    evidence: &str,
    variant: CheckVariant,
    llm: &LlmClient,
    settings: &CheckSettings,
) -> Result<CheckRecord, GuidelineError> {
    guidelines.validate()?;
    let prompts = render_check_prompt(guidelines, evidence, variant)?;

    let completions: Vec<Result<Completion, LlmError>> = if prompts.len() == 1 {
        prompts.into_iter().map(|p| ask_verdict(llm, p, variant, settings)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = prompts
                .into_iter()
                .map(|p| s.spawn(move || ask_verdict(llm, p, variant, settings)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("check worker panicked"))
                .collect()
        })
    };
    let completions = completions.into_iter().collect::<Result<Vec<_>, _>>()?;

    let outcome = match variant.granularity {
        Granularity::Whole => {
            let completion = &completions[0];
            match parse_verdict(completion) {
                Ok(probe) => {
                    let (verdict, score) = compliance_score_whole(probe.verdict, probe.raw_probability)?;
                    ComplianceOutcome {
                        verdict,
                        score,
                        explanation: variant.with_explanation.then_some(probe.explanation),
                        variant,
                        element_probes: None,
                        unparsable: false,
                    }
                }
                Err(GuidelineError::UnparsableVerdict(_)) => ComplianceOutcome {
                    verdict: Verdict::Fail,
                    score: 0.0,
                    explanation: variant.with_explanation.then(|| completion.text.trim().to_string()),
                    variant,
                    element_probes: None,
                    unparsable: true,
                },
                Err(e) => return Err(e),
            }
        }
        Granularity::PerElement => {
            let elements = guidelines
                .criteria
                .iter()
                .map(|c| (ElementKind::Criterion, c))
                .chain(guidelines.topics.iter().map(|t| (ElementKind::Topic, t)));
            let mut probes = Vec::with_capacity(completions.len());
            for ((kind, element), completion) in elements.zip(&completions) {
                let probe = match parse_verdict(completion) {
                    Ok(p) => ElementProbe {
                        kind,
                        element: element.clone(),
                        verdict: p.verdict,
                        affirmative_probability: p.affirmative_probability,
                        raw_probability: p.raw_probability,
                        explanation: variant.with_explanation.then_some(p.explanation),
                        unparsable: false,
                    },
                    Err(GuidelineError::UnparsableVerdict(_)) => ElementProbe {
                        kind,
                        element: element.clone(),
                        verdict: Verdict::Fail,
                        affirmative_probability: 0.0,
                        raw_probability: first_token_probability(completion)?,
                        explanation: variant.with_explanation.then(|| completion.text.trim().to_string()),
                        unparsable: true,
                    },
                    Err(e) => return Err(e),
                };
                probes.push(probe);
            }
            let of_kind = |k: ElementKind| probes.iter().filter(move |p| p.kind == k);
            let criterion_probs: Vec<f64> = of_kind(ElementKind::Criterion).map(|p| p.affirmative_probability).collect();
            let topic_probs: Vec<f64> = of_kind(ElementKind::Topic).map(|p| p.affirmative_probability).collect();
            let score = compliance_score_elements(&criterion_probs, &topic_probs)?;
            let pass = of_kind(ElementKind::Criterion).all(|p| p.verdict == Verdict::Pass)
                && of_kind(ElementKind::Topic).any(|p| p.verdict == Verdict::Pass);
            let explanation = variant.with_explanation.then(|| {
                probes
                    .iter()
                    .map(|p| {
                        let kind = match p.kind {
                            ElementKind::Criterion => "criterion",
                            ElementKind::Topic => "topic",
                        };
                        format!(
                            "[{kind}] {} ({}): {}",
                            p.element,
                            p.verdict,
                            p.explanation.as_deref().unwrap_or_default()
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
            let unparsable = probes.iter().any(|p| p.unparsable);
            ComplianceOutcome {
                verdict: if pass { Verdict::Pass } else { Verdict::Fail },
                score,
                explanation,
                variant,
                element_probes: Some(probes),
                unparsable,
            }
        }
    };

    Ok(CheckRecord { evidence: evidence.to_string(), outcome })
}
