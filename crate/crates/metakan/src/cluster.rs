//! Layer clustering for deep MetaKANs.
//!
//! Layers with similar channel sizes share one meta-learner. The partition is
//! the optimal contiguous one: dynamic programming minimizes the within-
//! cluster sum of squared deviations of the channel values. This is
//! deterministic and coincides with k-means whenever k-means labels happen to
//! come out contiguous, which is the behavior the clustering is after.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cluster count {clusters} must be between 1 and {layers}")]
    CountOutOfRange { clusters: usize, layers: usize },
    #[error("channel list is empty")]
    Empty,
}

/// A contiguous partition of layer indices `{0, ..., L-1}` into clusters,
/// each an inclusive `(start, end)` interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    intervals: Vec<(usize, usize)>,
}

impl ClusterPlan {
    /// Validates that the intervals are sorted, disjoint, contiguous, and
    /// exactly cover `0..num_layers`.
    pub fn new(intervals: Vec<(usize, usize)>) -> Result<Self, ClusterError> {
        if intervals.is_empty() {
            return Err(ClusterError::Empty);
        }
        let mut expected_start = 0;
        for &(start, end) in &intervals {
            if start != expected_start || end < start {
                return Err(ClusterError::CountOutOfRange {
                    clusters: intervals.len(),
                    layers: expected_start,
                });
            }
            expected_start = end + 1;
        }
        Ok(ClusterPlan { intervals })
    }

    /// One cluster spanning all layers.
    pub fn single(num_layers: usize) -> Self {
        ClusterPlan {
            intervals: vec![(0, num_layers.saturating_sub(1))],
        }
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    pub fn num_clusters(&self) -> usize {
        self.intervals.len()
    }

    /// Total layer count covered.
    pub fn num_layers(&self) -> usize {
        self.intervals.last().map(|&(_, end)| end + 1).unwrap_or(0)
    }

    /// Index of the cluster containing `layer`.
    pub fn cluster_of(&self, layer: usize) -> usize {
        self.intervals
            .iter()
            .position(|&(start, end)| layer >= start && layer <= end)
            .expect("layer inside plan")
    }
}

/// Optimal contiguous partition of `channels` into `clusters` intervals,
/// minimizing within-cluster SSE. O(L^2 C) dynamic program over prefix sums;
/// ties break toward the earliest split, so the result is deterministic.
#[allow(clippy::needless_range_loop)]
pub fn cluster_layers(channels: &[f64], clusters: usize) -> Result<ClusterPlan, ClusterError> {
    let n = channels.len();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if clusters == 0 || clusters > n {
        return Err(ClusterError::CountOutOfRange {
            clusters,
            layers: n,
        });
    }

    // Prefix sums for O(1) segment SSE:
    // sse(i, j) = sum(y^2) - (sum(y))^2 / count over channels[i..=j].
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &y) in channels.iter().enumerate() {
        prefix[i + 1] = prefix[i] + y;
        prefix_sq[i + 1] = prefix_sq[i] + y * y;
    }
    let sse = |i: usize, j: usize| -> f64 {
        let count = (j - i + 1) as f64;
        let sum = prefix[j + 1] - prefix[i];
        let sum_sq = prefix_sq[j + 1] - prefix_sq[i];
        (sum_sq - sum * sum / count).max(0.0)
    };

    // cost[c][j]: best cost covering 0..=j with c+1 clusters; split[c][j]
    // records where the last cluster starts.
    let mut cost = vec![vec![f64::INFINITY; n]; clusters];
    let mut split = vec![vec![0usize; n]; clusters];
    for j in 0..n {
        cost[0][j] = sse(0, j);
    }
    for c in 1..clusters {
        for j in c..n {
            for s in c..=j {
                let candidate = cost[c - 1][s - 1] + sse(s, j);
                if candidate < cost[c][j] {
                    cost[c][j] = candidate;
                    split[c][j] = s;
                }
            }
        }
    }

    let mut intervals = Vec::with_capacity(clusters);
    let mut end = n - 1;
    for c in (0..clusters).rev() {
        let start = if c == 0 { 0 } else { split[c][end] };
        intervals.push((start, end));
        if c > 0 {
            end = start - 1;
        }
    }
    intervals.reverse();
    ClusterPlan::new(intervals)
}
