//! Client-side interventions: nearest-neighbor label correction before the
//! first round, and the noise-scaled distillation mix used in local training.

use serde::Serialize;

use crate::dataset::DataView;
use crate::error::Result;
use crate::estimation::{estimate_knn, NoiseEstimate};
use crate::model::{LossMix, Metric, Mlp};

/// Outcome of label correction on one client. Oracle fields are `None`
/// when the dataset carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NncStats {
    pub client_id: usize,
    pub total: usize,
    pub flagged: usize,
    pub corrected: usize,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    /// Share of corrections that now match the true label.
    pub precision: Option<f64>,
    /// Share of originally wrong labels that were fixed.
    pub recall: Option<f64>,
}

/// Relabel flagged samples whose kNN agreement reaches `tau`. Samples below
/// the threshold keep their label.
pub fn nnc_correct(
    data: &DataView,
    estimate: &NoiseEstimate,
    tau: f64,
    oracle: Option<&[usize]>,
) -> (DataView, NncStats) {
    let mut corrected = data.clone();
    let mut changed = vec![false; data.len()];
    for i in 0..data.len() {
        if !estimate.flagged[i] {
            continue;
        }
        if let (Some(label), Some(&agreement)) = (estimate.suggested_labels[i], estimate.agreement.get(i)) {
            if agreement >= tau {
                corrected.labels[i] = label;
                changed[i] = true;
            }
        }
    }
    let n_changed = changed.iter().filter(|&&c| c).count();
    let mut stats = NncStats {
        client_id: estimate.client_id,
        total: data.len(),
        flagged: estimate.flagged_count(),
        corrected: n_changed,
        accuracy_before: None,
        accuracy_after: None,
        precision: None,
        recall: None,
    };
    if let Some(truth) = oracle {
        let accuracy = |labels: &[usize]| {
            labels.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
        };
        stats.accuracy_before = Some(accuracy(&data.labels));
        stats.accuracy_after = Some(accuracy(&corrected.labels));
        let right = (0..data.len())
            .filter(|&i| changed[i] && corrected.labels[i] == truth[i])
            .count();
        stats.precision = (n_changed > 0).then(|| right as f64 / n_changed as f64);
        let wrong_before = (0..data.len()).filter(|&i| data.labels[i] != truth[i]).count();
        let fixed = (0..data.len())
            .filter(|&i| data.labels[i] != truth[i] && corrected.labels[i] == truth[i])
            .count();
        stats.recall = (wrong_before > 0).then(|| fixed as f64 / wrong_before as f64);
    }
    (corrected, stats)
}

/// Estimate with kNN, then correct. Runs entirely on the client.
pub fn nnc_apply(
    client_id: usize,
    data: &DataView,
    k: usize,
    metric: Metric,
    tau: f64,
    oracle: Option<&[usize]>,
) -> Result<(DataView, NncStats)> {
    let estimate = estimate_knn(client_id, data, k, metric)?;
    Ok(nnc_correct(data, &estimate, tau, oracle))
}

/// Distillation weight follows the client's estimated noise level, capped at
/// `beta_max`. The teacher is the round-start global model.
pub fn akd_mix(n_hat: f64, beta_max: f64, temperature: f64, teacher: &Mlp) -> LossMix {
    LossMix {
        beta: n_hat.min(beta_max).clamp(0.0, 1.0),
        temperature,
        teacher: Some(teacher.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn cluster() -> (DataView, Vec<usize>) {
        // Seven class-0 points near the origin, two mislabeled as 1.
        let features: Vec<f64> = (0..7).flat_map(|i| [i as f64 * 0.01, 0.0]).collect();
        let labels = vec![0, 1, 0, 0, 1, 0, 0];
        (DataView::new(2, 2, features, labels).unwrap(), vec![0; 7])
    }

    #[test]
    fn corrects_confident_flags() {
        let (data, truth) = cluster();
        let (fixed, stats) = nnc_apply(0, &data, 4, Metric::Euclidean, 0.6, Some(&truth)).unwrap();
        assert_eq!(fixed.labels, truth);
        assert_eq!(stats.corrected, 2);
        assert_eq!(stats.precision, Some(1.0));
        assert_eq!(stats.recall, Some(1.0));
        assert_eq!(stats.accuracy_before, Some(5.0 / 7.0));
        assert_eq!(stats.accuracy_after, Some(1.0));
    }

    #[test]
    fn unreachable_threshold_is_a_no_op() {
        let (data, _) = cluster();
        let (fixed, stats) = nnc_apply(0, &data, 4, Metric::Euclidean, 1.01, None).unwrap();
        assert_eq!(fixed, data);
        assert_eq!(stats.corrected, 0);
        assert!(stats.flagged > 0);
        assert_eq!(stats.precision, None);
    }

    #[test]
    fn akd_mix_examples() {
        let t = init_weights(&[2, 2], 0).unwrap();
        assert_eq!(akd_mix(0.0, 0.7, 3.0, &t).beta, 0.0);
        assert_eq!(akd_mix(0.9, 0.7, 3.0, &t).beta, 0.7);
        assert_eq!(akd_mix(0.4, 0.7, 3.0, &t).beta, 0.4);
        assert_eq!(akd_mix(0.4, 0.7, 3.0, &t).teacher, Some(t));
    }
}
