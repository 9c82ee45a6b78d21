//! Repeated answer/check sampling, answer similarity, and clustering of
//! answer embeddings for reliability plots.

mod bundle;
mod jaccard;
mod kmeans;
mod projection;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use bundle::{histogram, read_bundle, write_bundle, BundlePaths, ClusterSummary, ReportSummary, HISTOGRAM_BINS};
pub use jaccard::{jaccard, word_set};
pub use kmeans::{annotate_clusters, kmeans, ClusterReport, MAX_ITERATIONS, SHIFT_TOLERANCE};
pub use projection::project_2d;

use crate::guidelines::{run_check, CheckVariant, Verdict};
use crate::pipeline::Bumper;

pub const DEFAULT_ANSWERS: usize = 25;
pub const DEFAULT_CHECKS: usize = 3;
pub const DEFAULT_CLUSTERS: usize = 4;
pub const DEFAULT_SAMPLE_PAIRS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum StabilityError {
    #[error("k = {k} is invalid for {n} vectors")]
    InvalidK { k: usize, n: usize },
    #[error("vectors have different dimensions")]
    DimensionMismatch,
    #[error("projection needs at least 2 vectors, got {0}")]
    InsufficientData(usize),
    #[error("non-finite values in clustering input or output")]
    NonFinite,
    #[error("n_answers and n_checks must be at least 1")]
    EmptyProtocol,
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("report bundle {path}: {message}")]
    Bundle { path: String, message: String },
}

/// The answers × checks matrix of one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSamples {
    pub query: String,
    pub variant: CheckVariant,
    pub n_checks: usize,
    pub scores: Vec<Vec<f64>>,
    pub verdicts: Vec<Vec<Verdict>>,
    pub answers: Vec<String>,
    /// False when a failure stopped sampling early; the rows present are
    /// the answers completed before the first failed one.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ScoreSamples {
    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn flat_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().flatten().copied()
    }

    /// Checks the shape and range invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.scores.len() != self.answers.len() || self.verdicts.len() != self.answers.len() {
            return Err("row count differs from answer count".into());
        }
        for (s, v) in self.scores.iter().zip(&self.verdicts) {
            if s.len() != self.n_checks || v.len() != self.n_checks {
                return Err("row length differs from n_checks".into());
            }
        }
        if let Some(bad) = self.flat_scores().find(|s| !(0.0..=1.0).contains(s)) {
            return Err(format!("score {bad} outside [0, 1]"));
        }
        Ok(())
    }
}

struct AnswerRow {
    answer: String,
    scores: Vec<f64>,
    verdicts: Vec<Verdict>,
}

fn sample_one(
    bumper: &Bumper,
    query: &str,
    n_checks: usize,
    variant: CheckVariant,
    seed: u64,
) -> Result<AnswerRow, String> {
    let temperature = bumper.config().synthesis.sampling_temperature;
    let evidence = bumper.synthesize(&[], query, temperature, Some(seed)).map_err(|(class, msg)| format!("{class}: {msg}"))?;
    let mut row = AnswerRow { answer: evidence.text, scores: Vec::new(), verdicts: Vec::new() };
    for j in 0..n_checks {
        let record = run_check(
            &bumper.config().guidelines,
            &row.answer,
            variant,
            bumper.llm(),
            &bumper.check_settings(Some(j as u64)),
        )
        .map_err(|e| format!("check {j}: {e}"))?;
        row.scores.push(record.outcome.score);
        row.verdicts.push(record.outcome.verdict);
    }
    Ok(row)
}

/// Synthesizes `n_answers` answers to `query` (answer `i` seeded with
/// `seed + i`) and checks each one `n_checks` times (check `j` seeded with
/// `j`). Answers are produced concurrently; rows keep answer order.
pub fn sample_scores(
    bumper: &Bumper,
    query: &str,
    n_answers: usize,
    n_checks: usize,
    variant: CheckVariant,
    seed: u64,
) -> Result<ScoreSamples, StabilityError> {
    if n_answers == 0 || n_checks == 0 {
        return Err(StabilityError::EmptyProtocol);
    }
    let workers = bumper.config().provider.max_in_flight.clamp(1, n_answers);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<AnswerRow, String>>>> = Mutex::new((0..n_answers).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n_answers {
                    break;
                }
                let row = sample_one(bumper, query, n_checks, variant, seed.wrapping_add(i as u64));
                if row.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(row);
            });
        }
    });

    let mut samples = ScoreSamples {
        query: query.to_string(),
        variant,
        n_checks,
        scores: Vec::new(),
        verdicts: Vec::new(),
        answers: Vec::new(),
        complete: true,
        failure: None,
    };
    for (i, slot) in slots.into_inner().unwrap_or_else(|e| e.into_inner()).into_iter().enumerate() {
        match slot {
            Some(Ok(row)) => {
                samples.answers.push(row.answer);
                samples.scores.push(row.scores);
                samples.verdicts.push(row.verdicts);
            }
            Some(Err(message)) => {
                samples.complete = false;
                samples.failure = Some(format!("answer {i}: {message}"));
                break;
            }
            None => {
                samples.complete = false;
                samples.failure.get_or_insert_with(|| format!("answer {i}: not attempted"));
                break;
            }
        }
    }
    if !samples.complete {
        tracing::warn!(failure = samples.failure.as_deref().unwrap_or(""), "sampling stopped early");
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluateSettings {
    pub n_answers: usize,
    pub n_checks: usize,
    pub variant: CheckVariant,
    pub k: usize,
    pub sample_pairs: usize,
    pub seed: u64,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            n_answers: DEFAULT_ANSWERS,
            n_checks: DEFAULT_CHECKS,
            variant: CheckVariant::default(),
            k: DEFAULT_CLUSTERS,
            sample_pairs: DEFAULT_SAMPLE_PAIRS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: ScoreSamples,
    /// Absent when no answer was produced.
    pub clusters: Option<ClusterReport>,
}

/// Sampling, then clustering of the answer embeddings with `k` capped at
/// the number of answers.
pub fn evaluate(bumper: &Bumper, query: &str, settings: &EvaluateSettings) -> Result<Evaluation, StabilityError> {
    let samples = sample_scores(bumper, query, settings.n_answers, settings.n_checks, settings.variant, settings.seed)?;
    if samples.answers.is_empty() {
        return Ok(Evaluation { samples, clusters: None });
    }
    let embeddings = samples
        .answers
        .iter()
        .map(|a| bumper.llm().embed(a))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| StabilityError::Embedding(e.to_string()))?;
    let k = settings.k.clamp(1, embeddings.len());
    let report = kmeans(&embeddings, k, settings.seed)?;
    let report = annotate_clusters(report, &samples.answers, settings.sample_pairs, settings.seed);
    Ok(Evaluation { samples, clusters: Some(report) })
}
