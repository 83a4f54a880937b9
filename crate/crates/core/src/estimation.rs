//! Per-client noise-level estimation.
//!
//! Both estimators run entirely on the client. The kNN estimator flags a
//! sample when the leave-one-out vote of its neighbors in feature space
//! disagrees with its observed label. The confidence estimator flags a
//! sample when the model is less confident in its observed label than that
//! class's average self-confidence while some other class clears its own
//! average. Either way the client reports only the flagged fraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::fed::trace::{Message, Trace};
use crate::model::{knn_predict, Metric, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMethod {
    Knn,
    Confidence,
}

impl EstimationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimationMethod::Knn => "knn",
            EstimationMethod::Confidence => "confidence",
        }
    }
}

/// Client-local result. Only `n_hat` is ever sent to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimate {
    pub client_id: usize,
    pub n_hat: f64,
    pub method: EstimationMethod,
    pub flagged: Vec<bool>,
    /// Proposed label for flagged samples that have an attributable
    /// alternative; `None` otherwise.
    pub suggested_labels: Vec<Option<usize>>,
    /// kNN vote share of the suggested label; empty for the confidence method.
    pub agreement: Vec<f64>,
}

impl NoiseEstimate {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }

    pub fn sample_count(&self) -> usize {
        self.flagged.len()
    }
}

fn fraction(flagged: &[bool]) -> f64 {
    if flagged.is_empty() {
        return 0.0;
    }
    flagged.iter().filter(|&&f| f).count() as f64 / flagged.len() as f64
}

/// Leave-one-out kNN vote over the client's own observed labels.
pub fn estimate_knn(
    client_id: usize,
    data: &DataView,
    k: usize,
    metric: Metric,
) -> Result<NoiseEstimate> {
    if data.len() <= k {
        return Err(Error::param(format!(
            "client {client_id} holds {} samples, kNN estimation with k = {k} needs more; \
             use the confidence method or a smaller k",
            data.len()
        )));
    }
    let mut flagged = Vec::with_capacity(data.len());
    let mut suggested = Vec::with_capacity(data.len());
    let mut agreement = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let vote = knn_predict(data, data.row(i), k, metric, Some(i))?;
        let disagree = vote.label != data.labels[i];
        flagged.push(disagree);
        suggested.push(disagree.then_some(vote.label));
        agreement.push(vote.agreement);
    }
    Ok(NoiseEstimate {
        client_id,
        n_hat: fraction(&flagged),
        method: EstimationMethod::Knn,
        flagged,
        suggested_labels: suggested,
        agreement,
    })
}

/// Per-class mean self-confidence thresholds. Classes without samples get
/// `+inf`. The mean is clamped into the range of its terms so that a
/// constant set of probabilities yields exactly that constant.
pub fn class_thresholds(probs: &[f64], classes: usize, labels: &[usize]) -> Vec<f64> {
    let mut sum = vec![0.0; classes];
    let mut count = vec![0usize; classes];
    let mut lo = vec![f64::INFINITY; classes];
    let mut hi = vec![f64::NEG_INFINITY; classes];
    for (row, &y) in probs.chunks(classes).zip(labels) {
        let p = row[y];
        sum[y] += p;
        count[y] += 1;
        lo[y] = lo[y].min(p);
        hi[y] = hi[y].max(p);
    }
    (0..classes)
        .map(|c| {
            if count[c] == 0 {
                f64::INFINITY
            } else {
                (sum[c] / count[c] as f64).clamp(lo[c], hi[c])
            }
        })
        .collect()
}

/// Confident-learning style flagging from a model's softmax outputs.
pub fn estimate_confidence(client_id: usize, model: &Mlp, data: &DataView) -> Result<NoiseEstimate> {
    if model.input_dim() != data.dim || model.num_classes() != data.num_classes {
        return Err(Error::DimensionMismatch {
            location: format!("client {client_id} estimation model"),
            expected: data.dim,
            found: model.input_dim(),
        });
    }
    let classes = data.num_classes;
    let out = model.forward(&data.features)?;
    let thresholds = class_thresholds(&out.probs, classes, &data.labels);

    let mut flagged = Vec::with_capacity(data.len());
    let mut suggested = Vec::with_capacity(data.len());
    for (i, &y) in data.labels.iter().enumerate() {
        let row = out.prob_row(i);
        let mut best: Option<usize> = None;
        if row[y] < thresholds[y] {
            for c in (0..classes).filter(|&c| c != y) {
                if row[c] >= thresholds[c] && best.is_none_or(|b| row[c] > row[b]) {
                    best = Some(c);
                }
            }
        }
        flagged.push(best.is_some());
        suggested.push(best);
    }
    Ok(NoiseEstimate {
        client_id,
        n_hat: fraction(&flagged),
        method: EstimationMethod::Confidence,
        flagged,
        suggested_labels: suggested,
        agreement: Vec::new(),
    })
}

/// Server-side view of one client's estimation result.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub client_id: usize,
    pub n_hat: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EstimationRound {
    pub method: EstimationMethod,
    /// One per client, in input order.
    pub reports: Vec<EstimateReport>,
    /// Client-local estimates. These never cross the network; they are
    /// returned so that the simulated client can reuse them (for NNC).
    pub local: Vec<Option<NoiseEstimate>>,
    pub trace: Trace,
}

/// Options for the kNN estimator.
#[derive(Debug, Clone, Copy)]
pub struct KnnOptions {
    pub k: usize,
    pub metric: Metric,
}

/// One communication round of estimation. The server broadcasts the global
/// parameters (confidence) or nothing (kNN); every client estimates locally
/// and uploads its scalar `n_hat`. A failing client is reported without
/// affecting the others.
pub fn estimation_round(
    clients: &[(usize, &DataView)],
    method: EstimationMethod,
    knn: KnnOptions,
    global: Option<&Mlp>,
) -> Result<EstimationRound> {
    let mut trace = Trace::default();
    match method {
        EstimationMethod::Knn => trace.push(Message::BroadcastNothing),
        EstimationMethod::Confidence => {
            let model = global.ok_or_else(|| {
                Error::param("confidence estimation requires a warmed-up global model")
            })?;
            trace.push(Message::BroadcastParameters {
                num_parameters: model.num_parameters(),
            });
        }
    }
    let results: Vec<Result<NoiseEstimate>> = clients
        .par_iter()
        .map(|&(id, data)| match method {
            EstimationMethod::Knn => estimate_knn(id, data, knn.k, knn.metric),
            EstimationMethod::Confidence => estimate_confidence(id, global.unwrap(), data),
        })
        .collect();

    let mut reports = Vec::with_capacity(clients.len());
    let mut local = Vec::with_capacity(clients.len());
    for (&(client_id, _), result) in clients.iter().zip(results) {
        match result {
            Ok(est) => {
                trace.push(Message::UploadNoiseLevel {
                    client_id,
                    n_hat: est.n_hat,
                });
                reports.push(EstimateReport {
                    client_id,
                    n_hat: Some(est.n_hat),
                    error: None,
                });
                local.push(Some(est));
            }
            Err(e) => {
                reports.push(EstimateReport {
                    client_id,
                    n_hat: None,
                    error: Some(e.to_string()),
                });
                local.push(None);
            }
        }
    }
    Ok(EstimationRound {
        method,
        reports,
        local,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(features: Vec<f64>, labels: Vec<usize>, classes: usize) -> DataView {
        let dim = features.len() / labels.len();
        DataView::new(dim, classes, features, labels).unwrap()
    }

    #[test]
    fn identical_points_have_no_noise() {
        let data = view(vec![1.0; 2 * 11], vec![2; 11], 3);
        let est = estimate_knn(0, &data, 10, Metric::Euclidean).unwrap();
        assert_eq!(est.n_hat, 0.0);
        assert!(est.suggested_labels.iter().all(Option::is_none));
    }

    #[test]
    fn knn_needs_more_than_k_samples() {
        let data = view(vec![0.0; 10], vec![0; 5], 2);
        let err = estimate_knn(3, &data, 5, Metric::Euclidean).unwrap_err();
        assert!(err.to_string().contains("confidence"), "{err}");
    }

    #[test]
    fn knn_flags_an_isolated_mislabel() {
        // Cluster of six class-0 points, one carrying label 1.
        let features = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        let data = view(features, vec![0, 0, 0, 1, 0, 0], 2);
        let est = estimate_knn(0, &data, 3, Metric::Euclidean).unwrap();
        assert_eq!(est.flagged, vec![false, false, false, true, false, false]);
        assert_eq!(est.suggested_labels[3], Some(0));
        assert!((est.n_hat - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(est.flagged_count(), 1);
    }

    fn fixed_model(classes: usize, logit_rows: &[Vec<f64>]) -> (Mlp, DataView) {
        // Identity first layer: inputs are the logits themselves.
        let mut w = vec![0.0; classes * classes];
        for c in 0..classes {
            w[c * classes + c] = 1.0;
        }
        let model = Mlp::from_parts(vec![classes, classes], vec![w], vec![vec![0.0; classes]]).unwrap();
        let features = logit_rows.concat();
        let data = DataView::new(classes, classes, features, vec![0; logit_rows.len()]).unwrap();
        (model, data)
    }

    #[test]
    fn confident_correct_model_flags_nothing() {
        let (model, mut data) = fixed_model(3, &[vec![50.0, 0.0, 0.0], vec![0.0, 60.0, 0.0], vec![0.0, 0.0, 70.0]]);
        data.labels = vec![0, 1, 2];
        let est = estimate_confidence(0, &model, &data).unwrap();
        assert_eq!(est.n_hat, 0.0);
    }

    #[test]
    fn uniform_model_flags_nothing() {
        let model = Mlp::zeros(&[3, 10]).unwrap();
        let features: Vec<f64> = (0..90).map(|i| (i as f64).sin()).collect();
        let labels: Vec<usize> = (0..30).map(|i| (i * 7) % 10).collect();
        let data = DataView::new(3, 10, features, labels).unwrap();
        assert_eq!(estimate_confidence(0, &model, &data).unwrap().n_hat, 0.0);
    }

    #[test]
    fn confidence_flags_sample_attributed_elsewhere() {
        // Class 0: two confident samples and one that looks like class 1.
        // Class 1: one confident sample.
        let (model, mut data) = fixed_model(
            2,
            &[vec![4.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0], vec![0.0, 4.0]],
        );
        data.labels = vec![0, 0, 0, 1];
        let est = estimate_confidence(0, &model, &data).unwrap();
        assert_eq!(est.flagged, vec![false, false, true, false]);
        assert_eq!(est.suggested_labels[2], Some(1));
        assert_eq!(est.n_hat, 0.25);
    }

    #[test]
    fn classes_without_samples_are_never_attributed() {
        let t = class_thresholds(&[0.2, 0.8, 0.6, 0.4], 2, &[1, 1]);
        assert_eq!(t[0], f64::INFINITY);
        assert!((t[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn round_isolates_failures_and_uploads_scalars() {
        let ok = view(vec![0.0; 24], vec![1; 12], 2);
        let small = view(vec![0.0; 4], vec![0; 2], 2);
        let clients = [(0, &ok), (1, &small), (2, &ok)];
        let knn = KnnOptions {
            k: 10,
            metric: Metric::Euclidean,
        };
        let round = estimation_round(&clients, EstimationMethod::Knn, knn, None).unwrap();
        assert_eq!(round.reports[0].n_hat, Some(0.0));
        assert!(round.reports[1].n_hat.is_none() && round.reports[1].error.is_some());
        assert_eq!(round.reports[2].n_hat, Some(0.0));
        assert!(round.trace.only_scalar_uploads());
        assert_eq!(round.trace.messages().len(), 3);

        assert!(estimation_round(&clients, EstimationMethod::Confidence, knn, None).is_err());
    }
}
