use fedln::noise::{
    apply_noise, build_noise_matrix, empirical_matrix, measure_noise_level,
    measure_noise_sparsity, NoiseSpec, NoiseStructure,
};
use proptest::prelude::*;

#[test]
fn level_and_sparsity_round_trip() {
    for c in [2usize, 4, 10, 26] {
        for step in 0..10 {
            let nl = step as f64 / 10.0;
            for ns in [0.0, 0.25, 0.5, 0.75, 1.0] {
                for structure in [NoiseStructure::Uniform, NoiseStructure::SparseRandom, NoiseStructure::ClassFlip] {
                    let spec = NoiseSpec::new(c, nl, ns, structure, 17);
                    let q = build_noise_matrix(&spec).unwrap();
                    assert!((measure_noise_level(&q) - nl).abs() < 1e-9, "{spec:?}");
                    if c >= 4 && nl > 0.0 {
                        let s = measure_noise_sparsity(&q).normalized;
                        let want = spec.effective_sparsity();
                        assert!((s - want).abs() <= 1.0 / (c - 1) as f64, "{spec:?}: {s}");
                    }
                }
            }
        }
    }
}

#[test]
fn odd_class_flip_leaves_last_class_clean() {
    let q = build_noise_matrix(&NoiseSpec::new(5, 0.4, 1.0, NoiseStructure::ClassFlip, 3)).unwrap();
    assert_eq!(q.get(4, 4), 1.0);
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(q.get(i, j) > 0.0, q.get(j, i) > 0.0);
        }
    }
}

#[test]
fn empirical_matrix_matches_construction() {
    let specs = [
        NoiseSpec::new(4, 0.6, 0.0, NoiseStructure::Uniform, 1),
        NoiseSpec::new(10, 0.3, 0.5, NoiseStructure::SparseRandom, 2),
        NoiseSpec::new(10, 0.4, 1.0, NoiseStructure::ClassFlip, 3),
        NoiseSpec::new(6, 0.8, 0.25, NoiseStructure::SparseRandom, 4),
        NoiseSpec::new(2, 0.2, 0.0, NoiseStructure::Uniform, 5),
    ];
    for (k, spec) in specs.iter().enumerate() {
        let q = build_noise_matrix(spec).unwrap();
        let truth: Vec<usize> = (0..100_000).map(|i| i % spec.num_classes).collect();
        let noisy = apply_noise(&truth, &q, 100 + k as u64).unwrap();
        let e = empirical_matrix(&truth, &noisy, spec.num_classes).unwrap();
        for (a, b) in e.rows().flatten().zip(q.rows().flatten()) {
            assert!((a - b).abs() <= 0.01, "{spec:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn constructed_matrices_are_column_stochastic(
        c in 2usize..30, nl in 0.0f64..=1.0, ns in 0.0f64..=1.0, structure in 0usize..3, seed: u64,
    ) {
        let structure = [NoiseStructure::Uniform, NoiseStructure::SparseRandom, NoiseStructure::ClassFlip][structure];
        let q = build_noise_matrix(&NoiseSpec::new(c, nl, ns, structure, seed)).unwrap();
        for j in 0..c {
            let col = q.column(j);
            prop_assert!(col.iter().all(|&v| v >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_noise_is_pure(labels in prop::collection::vec(0usize..5, 0..200), seed: u64) {
        let q = build_noise_matrix(&NoiseSpec::uniform(5, 0.5)).unwrap();
        prop_assert_eq!(apply_noise(&labels, &q, seed).unwrap(), apply_noise(&labels, &q, seed).unwrap());
    }
}
