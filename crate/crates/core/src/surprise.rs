//! Unexpectedness of a candidate relative to clusters of a user's history.
//!
//! History vectors are clustered with flat-kernel mean shift; a candidate's
//! unexpectedness is its distance to each cluster's mode, weighted by the
//! cluster's share of the history.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserId;
use crate::linalg::euclidean;
use crate::rng::stream_rng;

pub const SHIFT_TOLERANCE: f64 = 1e-6;
pub const MAX_SHIFT_ITERATIONS: usize = 100;
/// Bandwidth used when the history has fewer than two points or all
/// sampled distances are zero.
pub const FALLBACK_BANDWIDTH: f64 = 1e-3;
/// Pair budget for the median-distance bandwidth.
pub const BANDWIDTH_PAIRS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SurpriseError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("non-finite history vector at position {0}")]
    NonFinite(usize),
    #[error("vector dimensions differ: {expected} vs {found}")]
    Dimension { expected: usize, found: usize },
    #[error("clustering has no clusters")]
    NoClusters,
}

pub type Result<T> = std::result::Result<T, SurpriseError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryClustering {
    pub user_id: UserId,
    pub bandwidth: f64,
    pub clusters: Vec<Cluster>,
}

impl HistoryClustering {
    pub fn total_count(&self) -> usize {
        self.clusters.iter().map(|c| c.count).sum()
    }
}

fn shift_to_mode(start: &[f64], points: &[Vec<f64>], bandwidth: f64) -> (Vec<f64>, usize) {
    let dim = start.len();
    let mut pos = start.to_vec();
    let mut support = 0;
    for _ in 0..MAX_SHIFT_ITERATIONS {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for p in points {
            if euclidean(&pos, p) <= bandwidth {
                for (m, x) in mean.iter_mut().zip(p) {
                    *m += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            break;
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let moved = euclidean(&mean, &pos);
        pos = mean;
        support = n;
        if moved < SHIFT_TOLERANCE {
            break;
        }
    }
    (pos, support)
}

/// Flat-kernel mean shift started from every point. Converged modes closer
/// than `bandwidth / 2` are merged greedily, strongest support first; each
/// point then joins its nearest surviving mode and empty modes are dropped.
pub fn mean_shift(user_id: UserId, points: &[Vec<f64>], bandwidth: f64) -> Result<HistoryClustering> {
    if points.is_empty() {
        return Err(SurpriseError::EmptyHistory);
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(SurpriseError::Bandwidth(bandwidth));
    }
    let dim = points[0].len();
    for (k, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(SurpriseError::Dimension {
                expected: dim,
                found: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(SurpriseError::NonFinite(k));
        }
    }

    let mut modes: Vec<(Vec<f64>, usize, usize)> = points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let (m, s) = shift_to_mode(p, points, bandwidth);
            (m, s, k)
        })
        .collect();
    modes.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for (m, _, _) in modes {
        if kept.iter().all(|k| euclidean(k, &m) >= bandwidth / 2.0) {
            kept.push(m);
        }
    }

    let mut counts = vec![0usize; kept.len()];
    for p in points {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, m) in kept.iter().enumerate() {
            let d = euclidean(p, m);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        counts[best] += 1;
    }
    let clusters = kept
        .into_iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(centroid, count)| Cluster { centroid, count })
        .collect();
    Ok(HistoryClustering {
        user_id,
        bandwidth,
        clusters,
    })
}

/// `sum_k d(candidate, centroid_k) * (|C_k| / sum |C|)`. Weights are formed
/// before multiplying so a single cluster yields exactly its distance.
pub fn unexpectedness(clustering: &HistoryClustering, candidate: &[f64]) -> Result<f64> {
    let total = clustering.total_count();
    if clustering.clusters.is_empty() || total == 0 {
        return Err(SurpriseError::NoClusters);
    }
    let mut acc = 0.0;
    for c in &clustering.clusters {
        if c.centroid.len() != candidate.len() {
            return Err(SurpriseError::Dimension {
                expected: c.centroid.len(),
                found: candidate.len(),
            });
        }
        acc += euclidean(candidate, &c.centroid) * (c.count as f64 / total as f64);
    }
    Ok(acc)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median pairwise distance of the history: exact when there are at most
/// [`BANDWIDTH_PAIRS`] pairs, otherwise over that many seeded random pairs.
pub fn default_bandwidth(points: &[Vec<f64>], seed: u64, user_id: UserId) -> f64 {
    let n = points.len();
    if n < 2 {
        return FALLBACK_BANDWIDTH;
    }
    let all_pairs = n * (n - 1) / 2;
    let distances: Vec<f64> = if all_pairs <= BANDWIDTH_PAIRS {
        let mut d = Vec::with_capacity(all_pairs);
        for a in 0..n {
            for b in a + 1..n {
                d.push(euclidean(&points[a], &points[b]));
            }
        }
        d
    } else {
        let mut rng = stream_rng(seed, "bandwidth", u64::from(user_id));
        (0..BANDWIDTH_PAIRS)
            .map(|_| {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                euclidean(&points[a], &points[b])
            })
            .collect()
    };
    let m = median(distances);
    if m > 0.0 && m.is_finite() {
        m
    } else {
        FALLBACK_BANDWIDTH
    }
}
