//! On-disk report bundle: `scores.csv`, `clusters.csv`, `report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Evaluation, StabilityError};

pub const HISTOGRAM_BINS: usize = 20;

/// Counts of `scores` in equal-width bins over [0, 1]; 1.0 lands in the
/// last bin.
pub fn histogram(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let mut bins = vec![0; HISTOGRAM_BINS];
    for s in scores {
        let i = ((s * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub mean_jaccard: Option<f64>,
    /// First member answer, for the report table.
    pub example_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub query: String,
    pub variant: String,
    pub n_answers: usize,
    pub n_checks: usize,
    pub complete: bool,
    #[serde(default)]
    pub failure: Option<String>,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
    pub score_min: Option<f64>,
    pub score_max: Option<f64>,
    pub pass_rate: Option<f64>,
    pub distinct_scores: usize,
    /// Bin edges are `i / bins` for `i` in `0..=bins`.
    pub histogram: Vec<usize>,
    pub k: Option<usize>,
    pub inertia: Option<f64>,
    pub clusters: Vec<ClusterSummary>,
}

impl ReportSummary {
    pub fn from_evaluation(eval: &Evaluation) -> Self {
        let s = &eval.samples;
        let scores: Vec<f64> = s.flat_scores().collect();
        let n = scores.len() as f64;
        let (mean, std, min, max) = if scores.is_empty() {
            (None, None, None, None)
        } else {
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (
                Some(mean),
                Some(var.sqrt()),
                scores.iter().copied().reduce(f64::min),
                scores.iter().copied().reduce(f64::max),
            )
        };
        let verdicts: Vec<_> = s.verdicts.iter().flatten().collect();
        let pass_rate = (!verdicts.is_empty()).then(|| {
            verdicts.iter().filter(|v| ***v == crate::guidelines::Verdict::Pass).count() as f64 / verdicts.len() as f64
        });
        let mut distinct = scores.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();

        let clusters = eval
            .clusters
            .as_ref()
            .map(|c| {
                (0..c.k)
                    .map(|cluster| {
                        let members = c.members(cluster);
                        ClusterSummary {
                            cluster,
                            size: members.len(),
                            mean_jaccard: c.per_cluster_jaccard.get(&cluster).copied().flatten(),
                            example_answer: members.first().map(|&i| s.answers[i].clone()),
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();

        Self {
            query: s.query.clone(),
            variant: s.variant.to_string(),
            n_answers: s.n_answers(),
            n_checks: s.n_checks,
            complete: s.complete,
            failure: s.failure.clone(),
            score_mean: mean,
            score_std: std,
            score_min: min,
            score_max: max,
            pass_rate,
            distinct_scores: distinct.len(),
            histogram: histogram(scores),
            k: eval.clusters.as_ref().map(|c| c.k),
            inertia: eval.clusters.as_ref().map(|c| c.inertia),
            clusters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundlePaths {
    pub scores_csv: PathBuf,
    pub clusters_csv: PathBuf,
    pub report_json: PathBuf,
}

impl BundlePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            scores_csv: dir.join("scores.csv"),
            clusters_csv: dir.join("clusters.csv"),
            report_json: dir.join("report.json"),
        }
    }
}

fn bundle_err(path: &Path, e: impl std::fmt::Display) -> StabilityError {
    StabilityError::Bundle { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_bundle(dir: &Path, eval: &Evaluation) -> Result<BundlePaths, StabilityError> {
    fs::create_dir_all(dir).map_err(|e| bundle_err(dir, e))?;
    let paths = BundlePaths::in_dir(dir);
    let s = &eval.samples;
    let variant = s.variant.to_string();

    let mut w = csv::Writer::from_path(&paths.scores_csv).map_err(|e| bundle_err(&paths.scores_csv, e))?;
    w.write_record(["answer_idx", "check_idx", "variant", "verdict", "score"])
        .map_err(|e| bundle_err(&paths.scores_csv, e))?;
    for (i, (scores, verdicts)) in s.scores.iter().zip(&s.verdicts).enumerate() {
        for (j, (score, verdict)) in scores.iter().zip(verdicts).enumerate() {
            w.write_record([i.to_string(), j.to_string(), variant.clone(), verdict.to_string(), score.to_string()])
                .map_err(|e| bundle_err(&paths.scores_csv, e))?;
        }
    }
    w.flush().map_err(|e| bundle_err(&paths.scores_csv, e))?;

    let mut w = csv::Writer::from_path(&paths.clusters_csv).map_err(|e| bundle_err(&paths.clusters_csv, e))?;
    w.write_record(["answer_idx", "cluster", "x", "y", "jaccard_annotation"])
        .map_err(|e| bundle_err(&paths.clusters_csv, e))?;
    if let Some(c) = &eval.clusters {
        for (i, (cluster, (x, y))) in c.assignments.iter().zip(&c.projection_2d).enumerate() {
            let annotation = c.per_cluster_jaccard.get(cluster).copied().flatten().map(|j| j.to_string()).unwrap_or_default();
            w.write_record([i.to_string(), cluster.to_string(), x.to_string(), y.to_string(), annotation])
                .map_err(|e| bundle_err(&paths.clusters_csv, e))?;
        }
    }
    w.flush().map_err(|e| bundle_err(&paths.clusters_csv, e))?;

    let summary = ReportSummary::from_evaluation(eval);
    let body = serde_json::to_vec_pretty(&summary).map_err(|e| bundle_err(&paths.report_json, e))?;
    fs::write(&paths.report_json, body).map_err(|e| bundle_err(&paths.report_json, e))?;
    Ok(paths)
}

/// Reads `report.json` from a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<ReportSummary, StabilityError> {
    let path = BundlePaths::in_dir(dir).report_json;
    let raw = fs::read(&path).map_err(|e| bundle_err(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| bundle_err(&path, e))
}
