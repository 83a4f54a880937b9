//! Brute-force k-nearest-neighbor vote over a reference view.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::DataView;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
    Cosine,
}

impl Metric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            // Squared distance orders neighbors identically.
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na.sqrt() * nb.sqrt())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Votes for the winning label divided by `k`.
    pub agreement: f64,
}

/// Indices of the `k` nearest references, nearest first. Distance ties go to
/// the lower reference index. `exclude` removes one reference (the query
/// itself under leave-one-out).
pub fn neighbors(
    reference: &DataView,
    query: &[f64],
    k: usize,
    metric: Metric,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    if query.len() != reference.dim {
        return Err(Error::DimensionMismatch {
            location: "knn query".into(),
            expected: reference.dim,
            found: query.len(),
        });
    }
    let available = reference.len() - usize::from(exclude.is_some_and(|i| i < reference.len()));
    if k == 0 || k > available {
        return Err(Error::param(format!(
            "k = {k} needs between 1 and {available} reference points"
        )));
    }
    let mut scored: Vec<(f64, usize)> = (0..reference.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (metric.distance(reference.row(i), query), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Majority vote among the `k` nearest references' observed labels. Vote
/// ties go to the lower class index.
pub fn knn_predict(
    reference: &DataView,
    query: &[f64],
    k: usize,
    metric: Metric,
    exclude: Option<usize>,
) -> Result<Prediction> {
    let nn = neighbors(reference, query, k, metric, exclude)?;
    let mut votes = vec![0usize; reference.num_classes];
    for i in nn {
        votes[reference.labels[i]] += 1;
    }
    let (label, &count) = votes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(Ordering::Greater))
        .expect("at least two classes");
    Ok(Prediction {
        label,
        agreement: count as f64 / k as f64,
    })
}
