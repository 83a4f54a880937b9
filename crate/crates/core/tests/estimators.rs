mod common;

use fedln::dataset::DataView;
use fedln::estimation::{estimate_knn, EstimationMethod};
use fedln::model::{knn_predict, Metric};
use fedln::seed;
use rand::Rng;

/// Exhaustive kNN: sort every reference by (distance, index), count votes.
fn brute_vote(data: &DataView, i: usize, k: usize) -> usize {
    let mut d: Vec<(f64, usize)> = (0..data.len())
        .filter(|&j| j != i)
        .map(|j| {
            let dist = data.row(i).iter().zip(data.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0; data.num_classes];
    for &(_, j) in &d[..k] {
        votes[data.labels[j]] += 1;
    }
    let best = *votes.iter().max().unwrap();
    votes.iter().position(|&v| v == best).unwrap()
}

#[test]
fn knn_estimate_agrees_with_brute_force() {
    for trial in 0..5 {
        let mut rng = seed::rng(trial);
        let (n, dim, c, k) = (80, 3, 4, 1 + trial as usize * 2);
        // Integer coordinates produce many distance ties.
        let features = (0..n * dim).map(|_| rng.gen_range(-3..=3) as f64).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let data = DataView::new(dim, c, features, labels).unwrap();
        let est = estimate_knn(0, &data, k, Metric::Euclidean).unwrap();
        for i in 0..n {
            let vote = brute_vote(&data, i, k);
            assert_eq!(knn_predict(&data, data.row(i), k, Metric::Euclidean, Some(i)).unwrap().label, vote);
            assert_eq!(est.flagged[i], vote != data.labels[i]);
        }
        let flagged = est.flagged.iter().filter(|&&f| f).count();
        assert_eq!(est.n_hat, flagged as f64 / n as f64);
    }
}

#[test]
fn identical_points_are_never_flagged() {
    let data = DataView::new(2, 3, vec![1.0; 22], vec![2; 11]).unwrap();
    assert_eq!(estimate_knn(0, &data, 10, Metric::Cosine).unwrap().n_hat, 0.0);
}

#[test]
fn estimates_follow_client_noise_ordering() {
    use fedln::harness::ClientNoise;
    use fedln::noise::NoiseStructure;
    let mut s = common::small(0.0, 3);
    s.federated.k = 5;
    s.federated.rounds = 20;
    s.federated.warmup_rounds = 20;
    s.noise.per_client = [(0, 0.0), (1, 0.2), (2, 0.6)]
        .into_iter()
        .map(|(client_id, noise_level)| ClientNoise {
            client_id,
            noise_level,
            noise_sparsity: 0.0,
            structure: NoiseStructure::Uniform,
        })
        .collect();
    for method in [EstimationMethod::Knn, EstimationMethod::Confidence] {
        let (_, out) = fedln::harness::run_estimation(&s, method, Default::default()).unwrap();
        let n: Vec<f64> = out.summary.clients.iter().take(3).map(|c| c.n_hat.unwrap()).collect();
        assert!(n[0] < n[1] && n[1] < n[2], "{method:?}: {n:?}");
    }
}

#[test]
fn failing_client_does_not_abort_the_round() {
    let mut s = common::small(0.2, 1);
    s.federated.k = 200; // every client holds 60 samples
    let (_, out) = fedln::harness::run_estimation(&s, EstimationMethod::Knn, Default::default()).unwrap();
    assert!(out.summary.clients.iter().all(|c| c.n_hat.is_none() && c.estimation_error.is_some()));
    s.federated.k = 5;
    let (_, out) = fedln::harness::run_estimation(&s, EstimationMethod::Knn, Default::default()).unwrap();
    assert!(out.summary.clients.iter().all(|c| c.n_hat.is_some()));
}
