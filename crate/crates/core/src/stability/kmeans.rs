use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{jaccard, project_2d, StabilityError};
use crate::llm::EmbeddingVector;

pub const MAX_ITERATIONS: usize = 300;
pub const SHIFT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<EmbeddingVector>,
    /// Sum of squared distances of each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, final assignment last.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Mean pairwise Jaccard per cluster; `None` for singletons.
    pub per_cluster_jaccard: BTreeMap<usize, Option<f64>>,
    pub projection_2d: Vec<(f64, f64)>,
}

impl ClusterReport {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments.iter().enumerate().filter(|(_, &c)| c == cluster).map(|(i, _)| i).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (c, d) = nearest(p, centroids);
            inertia += d;
            c
        })
        .collect();
    (labels, inertia)
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].to_vec());
    }
    centroids
}

/// Seeded k-means++ followed by Lloyd iterations until no centroid moves
/// more than [`SHIFT_TOLERANCE`] or [`MAX_ITERATIONS`] is reached.
pub fn kmeans(vectors: &[EmbeddingVector], k: usize, seed: u64) -> Result<ClusterReport, StabilityError> {
    if k == 0 || k > vectors.len() {
        return Err(StabilityError::InvalidK { k, n: vectors.len() });
    }
    let dim = vectors[0].dimension();
    if vectors.iter().any(|v| v.dimension() != dim) {
        return Err(StabilityError::DimensionMismatch);
    }
    let points: Vec<&[f64]> = vectors.iter().map(EmbeddingVector::values).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);

    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (labels, inertia) = assign(&points, &centroids);
        history.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            // an empty cluster keeps its centroid
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    let (assignments, inertia) = assign(&points, &centroids);
    history.push(inertia);

    let projection_2d = if vectors.len() >= 2 { project_2d(vectors)? } else { vec![(0.0, 0.0)] };
    Ok(ClusterReport {
        k,
        assignments,
        centroids: centroids
            .into_iter()
            .map(|c| EmbeddingVector::new(c).map_err(|_| StabilityError::NonFinite))
            .collect::<Result<_, _>>()?,
        inertia,
        inertia_history: history,
        iterations,
        per_cluster_jaccard: BTreeMap::new(),
        projection_2d,
    })
}

/// Mean Jaccard similarity inside each cluster over at most `sample_pairs`
/// seeded-random member pairs (all pairs when there are fewer).
pub fn annotate_clusters(mut report: ClusterReport, answers: &[String], sample_pairs: usize, seed: u64) -> ClusterReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut annotations = BTreeMap::new();
    for cluster in 0..report.k {
        let members = report.members(cluster);
        if members.len() < 2 {
            annotations.insert(cluster, None);
            continue;
        }
        let pairs: Vec<(usize, usize)> = members
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| members[i + 1..].iter().map(move |&b| (a, b)))
            .collect();
        let chosen: Vec<(usize, usize)> = if pairs.len() <= sample_pairs {
            pairs
        } else {
            rand::seq::index::sample(&mut rng, pairs.len(), sample_pairs).iter().map(|i| pairs[i]).collect()
        };
        let mean = if chosen.is_empty() {
            None
        } else {
            Some(chosen.iter().map(|&(a, b)| jaccard(&answers[a], &answers[b])).sum::<f64>() / chosen.len() as f64)
        };
        annotations.insert(cluster, mean);
    }
    report.per_cluster_jaccard = annotations;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn k_equal_to_count_gives_zero_inertia() {
        let vs = [ev(&[0.0, 0.0]), ev(&[1.0, 5.0]), ev(&[-3.0, 2.0])];
        let r = kmeans(&vs, 3, 7).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut sorted = r.assignments.clone();
        sorted.sort();
        assert_eq!(sorted, [0, 1, 2]);
    }

    #[test]
    fn identical_vectors_single_cluster() {
        let vs = vec![ev(&[2.0, -1.0, 0.5]); 5];
        let r = kmeans(&vs, 1, 0).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.centroids, [ev(&[2.0, -1.0, 0.5])]);
    }

    #[test]
    fn invalid_k() {
        let vs = [ev(&[0.0])];
        assert!(matches!(kmeans(&vs, 2, 0), Err(StabilityError::InvalidK { .. })));
        assert!(matches!(kmeans(&vs, 0, 0), Err(StabilityError::InvalidK { .. })));
        assert!(matches!(kmeans(&[ev(&[0.0]), ev(&[0.0, 1.0])], 1, 0), Err(StabilityError::DimensionMismatch)));
    }

    #[test]
    fn duplicates_with_k_above_distinct_count() {
        let vs = vec![ev(&[1.0]), ev(&[1.0]), ev(&[1.0])];
        let r = kmeans(&vs, 3, 1).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn annotate_examples() {
        let answers: Vec<String> = ["a b c", "b c d", "a b d"].iter().map(|s| s.to_string()).collect();
        let report = ClusterReport {
            k: 2,
            assignments: vec![0, 0, 0],
            centroids: vec![],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            per_cluster_jaccard: BTreeMap::new(),
            projection_2d: vec![],
        };
        let r = annotate_clusters(report, &answers, 20, 0);
        // pairs: (abc, bcd) = 2/4, (abc, abd) = 2/4, (bcd, abd) = 2/4
        assert_eq!(r.per_cluster_jaccard[&0], Some(0.5));
        assert_eq!(r.per_cluster_jaccard[&1], None);
    }

    #[test]
    fn annotate_identical_and_disjoint() {
        let base = ClusterReport {
            k: 1,
            assignments: vec![0, 0],
            centroids: vec![],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            per_cluster_jaccard: BTreeMap::new(),
            projection_2d: vec![],
        };
        let same = vec!["x y".to_string(), "x y".to_string()];
        assert_eq!(annotate_clusters(base.clone(), &same, 20, 0).per_cluster_jaccard[&0], Some(1.0));
        let disjoint = vec!["x y".to_string(), "z w".to_string()];
        assert_eq!(annotate_clusters(base, &disjoint, 20, 0).per_cluster_jaccard[&0], Some(0.0));
    }

    #[test]
    fn sampling_caps_pairs() {
        let answers: Vec<String> = (0..10).map(|i| format!("w{i} common")).collect();
        let report = ClusterReport {
            k: 1,
            assignments: vec![0; 10],
            centroids: vec![],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            per_cluster_jaccard: BTreeMap::new(),
            projection_2d: vec![],
        };
        // every pair shares one of three words
        let r = annotate_clusters(report, &answers, 20, 3);
        assert!((r.per_cluster_jaccard[&0].unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}
