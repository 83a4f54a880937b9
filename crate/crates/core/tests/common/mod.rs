//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use fedln::dataset::{
    corrupt_clients, generate_gaussian_mixture, partition_iid, DataView, EmbeddingDataset,
    PartitionMap, SyntheticSpec,
};
use fedln::estimation::EstimationMethod;
use fedln::fed::{
    client_train_seed, fedavg_aggregate, na_fedavg_aggregate, run_corrupted, run_experiment,
    ClientUpdate,
    ExperimentOutput, FederatedConfig, InitCorrection, LocalLoss, RunOptions, Strategy,
};
use fedln::harness::{DatasetSource, NoisePlan, PartitionSpec, Scenario, SyntheticSource};
use fedln::model::{init_weights, loss_and_gradient, train_local, LossMix, Mlp, TrainConfig};
use fedln::noise::{ClientNoiseProfile, NoiseMatrix, NoiseStructure};
use fedln::seed::{self, tag};
use rand::Rng;
use rand_distr::StandardNormal;

/// δ=6 mixture, C=10, d=32, 500 per class, 10 IID clients, uniform noise.
pub fn benchmark(noise_level: f64, seed: u64) -> Scenario {
    scenario(
        SyntheticSource {
            num_classes: 10,
            dim: 32,
            per_class_count: 500,
            separation: 6.0,
        },
        10,
        noise_level,
        seed,
    )
}

/// Small and fast: C=4, d=8, 60 per class, 4 clients.
pub fn small(noise_level: f64, seed: u64) -> Scenario {
    let mut s = scenario(
        SyntheticSource {
            num_classes: 4,
            dim: 8,
            per_class_count: 60,
            separation: 4.0,
        },
        4,
        noise_level,
        seed,
    );
    s.federated.rounds = 3;
    s.federated.hidden_layers = vec![16];
    s.federated.warmup_rounds = 1;
    s
}

fn scenario(source: SyntheticSource, clients: usize, noise_level: f64, seed: u64) -> Scenario {
    Scenario {
        name: "test".into(),
        seed,
        dataset: DatasetSource::Synthetic(source),
        partition: PartitionSpec::Iid,
        noise: NoisePlan {
            noise_level,
            noise_sparsity: 0.0,
            structure: NoiseStructure::Uniform,
            noisy_client_fraction: 1.0,
            per_client: Vec::new(),
        },
        federated: FederatedConfig::new(clients),
        output_dir: ".".into(),
    }
    .resolved()
}

pub fn set_strategy(s: &mut Scenario, name: &str) {
    fedln::harness::apply_strategy(s, name).unwrap();
}

pub fn run(s: &Scenario, workers: usize) -> ExperimentOutput {
    fedln::harness::run_scenario(s, RunOptions { workers }).unwrap()
}

fn random_view(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> DataView {
    let features = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    DataView::new(dim, classes, features, labels).unwrap()
}

/// Largest relative error `|a - f| / max(|a|, |f|, 1e-6)` between analytic
/// and central-difference gradients, over `models` random [5,7,3] networks
/// with a distillation term and weight decay switched on.
pub fn gradient_check(models: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for m in 0..models {
        let mut rng = seed::rng(1000 + m);
        let model = init_weights(&[5, 7, 3], 2 * m).unwrap();
        let teacher = init_weights(&[5, 7, 3], 2 * m + 1).unwrap();
        let data = random_view(&mut rng, 6, 5, 3);
        let mix = LossMix {
            beta: 0.4,
            temperature: 2.0,
            teacher: Some(teacher),
        };
        let wd = 1e-3;
        let (_, grads) = loss_and_gradient(&model, &data.features, &data.labels, &mix, wd).unwrap();
        let analytic = grads.flatten();
        let flat = model.flatten();
        let h = 1e-6;
        for (p, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut f = flat.clone();
                f[p] += delta;
                let probe = model.unflatten(&f).unwrap();
                loss_and_gradient(&probe, &data.features, &data.labels, &mix, wd).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Largest absolute gap between `fedavg_aggregate` and a flat-vector
/// weighted mean over `cases` random cohorts.
pub fn fedavg_oracle_gap(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seed::rng(5000 + case);
        let n = rng.gen_range(1..=8);
        let sizes = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(2..5)];
        let updates: Vec<ClientUpdate> = (0..n)
            .map(|i| ClientUpdate {
                client_id: i,
                model: init_weights(&sizes, case * 100 + i as u64).unwrap(),
                sample_count: rng.gen_range(1..1000),
                n_hat: None,
            })
            .collect();
        let total: usize = updates.iter().map(|u| u.sample_count).sum();
        let mut oracle = vec![0.0; updates[0].model.num_parameters()];
        for u in &updates {
            let w = u.sample_count as f64 / total as f64;
            for (o, p) in oracle.iter_mut().zip(u.model.flatten()) {
                *o += w * p;
            }
        }
        let agg = fedavg_aggregate(&updates).unwrap();
        for (a, o) in agg.model.flatten().iter().zip(&oracle) {
            worst = worst.max((a - o).abs());
        }
    }
    worst
}

fn single_client_setup() -> (EmbeddingDataset, EmbeddingDataset, PartitionMap, FederatedConfig) {
    let spec = SyntheticSpec {
        num_classes: 3,
        dim: 4,
        per_class_count: 30,
        separation: 3.0,
        seed: 11,
    };
    let (train, test) = generate_gaussian_mixture(&spec).unwrap();
    let partition = partition_iid(train.len(), 1, 0).unwrap();
    let mut config = FederatedConfig::new(1);
    config.rounds = 4;
    config.hidden_layers = vec![6];
    config.train.local_epochs = 2;
    config.seed = 99;
    (train, test, partition, config)
}

/// One client with full participation must reproduce plain sequential
/// training bit for bit.
pub fn single_client_is_centralized() -> bool {
    let (train, test, partition, config) = single_client_setup();
    let profiles = [ClientNoiseProfile {
        client_id: 0,
        matrix: NoiseMatrix::identity(3),
    }];
    let fed = run_experiment(&config, &train, &test, &partition, &profiles, 0, RunOptions::default())
        .unwrap();

    let data = train.view();
    let mut model = init_weights(&[4, 6, 3], seed::hash64(config.seed, &[tag::MODEL_INIT])).unwrap();
    for r in 1..=config.rounds {
        let tc = TrainConfig {
            seed: client_train_seed(config.seed, r, 0),
            ..config.train.clone()
        };
        model = train_local(&model, &data, &tc, &LossMix::cross_entropy()).unwrap().0;
    }
    fed.model == model
}

/// The no-op cases of each intervention, checked bitwise against FedAvg
/// with cross-entropy.
pub fn degeneracies() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();

    // NA-FedAvg with all-zero estimates equals FedAvg.
    let updates: Vec<ClientUpdate> = (0..5)
        .map(|i| ClientUpdate {
            client_id: i,
            model: init_weights(&[4, 5, 3], i as u64).unwrap(),
            sample_count: 10 + 7 * i,
            n_hat: Some(0.0),
        })
        .collect();
    out.push((
        "na_fedavg with zero estimates",
        na_fedavg_aggregate(&updates).unwrap().model == fedavg_aggregate(&updates).unwrap().model,
    ));

    // AKD with beta = 0 equals cross-entropy training.
    let mut rng = seed::rng(3);
    let data = random_view(&mut rng, 40, 4, 3);
    let model = init_weights(&[4, 5, 3], 1).unwrap();
    let tc = TrainConfig::default();
    let zero = LossMix {
        beta: 0.0,
        temperature: 3.0,
        teacher: Some(init_weights(&[4, 5, 3], 2).unwrap()),
    };
    out.push((
        "akd with beta 0",
        train_local(&model, &data, &tc, &zero).unwrap() == train_local(&model, &data, &tc, &LossMix::cross_entropy()).unwrap(),
    ));

    // Whole runs: NNC above any agreement, AKD with beta_max 0.
    let base = {
        let mut s = small(0.3, 4);
        s.federated.k = 5;
        s
    };
    let reference = run(&base, 1);
    let mut nnc = base.clone();
    nnc.federated.init_correction = InitCorrection::Nnc;
    nnc.federated.tau_nnc = 1.01;
    out.push(("nnc with tau 1.01", run(&nnc, 1).model == reference.model));

    let mut akd = base.clone();
    akd.federated.local_loss = LocalLoss::Akd;
    akd.federated.estimation_method = Some(EstimationMethod::Knn);
    akd.federated.beta_max = 0.0;
    out.push(("akd with beta_max 0", run(&akd, 1).model == reference.model));

    let clean = small(0.0, 4);
    let mut na = clean.clone();
    na.federated.strategy = Strategy::NaFedavg;
    na.federated.estimation_method = Some(EstimationMethod::Knn);
    let na_out = run(&na, 1);
    let all_zero = na_out.summary.clients.iter().all(|c| c.n_hat == Some(0.0));
    out.push((
        "na_fedavg run on zero estimates",
        !all_zero || na_out.model == run(&clean, 1).model,
    ));
    out
}

/// Outputs at 1 and 4 workers, with partial participation and every
/// intervention active.
pub fn schedule_independent() -> bool {
    let mut s = small(0.4, 8);
    set_strategy(&mut s, "fedln_full");
    s.federated.k = 5;
    s.federated.participation_fraction = 0.75;
    let a = run(&s, 1);
    let b = run(&s, 4);
    let timeless = |o: &ExperimentOutput| o.reports.iter().map(|r| r.timeless()).collect::<Vec<_>>();
    a.model == b.model && timeless(&a) == timeless(&b) && a.summary == b.summary
}

/// Scrambling the evaluation-only true labels after corruption must not
/// move any weight.
pub fn poisoned_truth_is_invisible() -> bool {
    let mut s = small(0.4, 21);
    set_strategy(&mut s, "fedln_full");
    s.federated.k = 5;
    let (train, test) = s.datasets().unwrap();
    let partition = s.partition(&train).unwrap();
    let profiles = s.profiles(train.num_classes).unwrap();
    let noisy = corrupt_clients(&train, &partition, &profiles, s.corruption_seed()).unwrap();
    let mut poisoned = noisy.clone();
    let c = poisoned.num_classes;
    for (i, e) in poisoned.examples.iter_mut().enumerate() {
        e.true_label = (e.true_label + 1 + i % (c - 1)) % c;
    }
    let go = |data: &EmbeddingDataset| -> Mlp {
        run_corrupted(&s.federated, data, &test, &partition, &profiles, RunOptions::default())
            .unwrap()
            .model
    };
    go(&noisy) == go(&poisoned)
}

/// The estimation round uploads nothing but `(client_id, n_hat)`.
pub fn estimation_trace_is_scalar(method: EstimationMethod) -> bool {
    let mut s = small(0.4, 5);
    s.federated.k = 5;
    s.federated.estimation_method = Some(method);
    s.federated.strategy = Strategy::NaFedavg;
    let out = run(&s, 1);
    out.estimation_trace.is_some_and(|t| t.only_scalar_uploads())
}
