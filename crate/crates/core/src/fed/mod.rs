//! Round-based federated training with optional noise handling at three
//! points: label correction before the first round, noise-scaled
//! distillation during local training, and noise-aware aggregation.
//!
//! The server loop is sequential across rounds. Within a round, clients
//! train on a rayon pool of the requested size; results are merged in
//! client-id order, so output never depends on the worker count.

mod aggregate;
mod interventions;
pub mod trace;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{corrupt_clients, DataView, EmbeddingDataset, PartitionMap};
use crate::error::{Error, Result};
use crate::estimation::{
    estimation_round, EstimationMethod, EstimationRound, KnnOptions, NoiseEstimate,
};
use crate::model::{init_weights, train_local, LossMix, Metric, Mlp, TrainConfig};
use crate::noise::{measure_noise_level, ClientNoiseProfile};
use crate::seed::{self, tag};

pub use aggregate::{
    fedavg_aggregate, fedavg_weights, na_fedavg_aggregate, noise_aware_weight, Aggregate,
    ClientUpdate, MIN_WEIGHT_MASS,
};
pub use interventions::{akd_mix, nnc_apply, nnc_correct, NncStats};
use trace::{Message, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    NaFedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCorrection {
    None,
    Nnc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalLoss {
    Ce,
    Akd,
}

fn default_participation() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    100
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_strategy() -> Strategy {
    Strategy::Fedavg
}
fn default_init() -> InitCorrection {
    InitCorrection::None
}
fn default_loss() -> LocalLoss {
    LocalLoss::Ce
}
fn default_k() -> usize {
    10
}
fn default_metric() -> Metric {
    Metric::Euclidean
}
fn default_tau() -> f64 {
    0.6
}
fn default_beta_max() -> f64 {
    0.9
}
fn default_temperature() -> f64 {
    3.0
}
fn default_warmup() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    pub num_clients: usize,
    #[serde(default = "default_participation")]
    pub participation_fraction: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Hidden layer widths of the shared model.
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_init")]
    pub init_correction: InitCorrection,
    #[serde(default = "default_loss")]
    pub local_loss: LocalLoss,
    #[serde(default)]
    pub estimation_method: Option<EstimationMethod>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_metric")]
    pub knn_metric: Metric,
    #[serde(default = "default_tau")]
    pub tau_nnc: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_warmup")]
    pub warmup_rounds: usize,
    #[serde(default)]
    pub seed: u64,
}

impl FederatedConfig {
    /// Plain FedAvg with the default table.
    pub fn new(num_clients: usize) -> Self {
        Self {
            num_clients,
            participation_fraction: default_participation(),
            rounds: default_rounds(),
            train: TrainConfig::default(),
            hidden_layers: default_hidden(),
            strategy: default_strategy(),
            init_correction: default_init(),
            local_loss: default_loss(),
            estimation_method: None,
            k: default_k(),
            knn_metric: default_metric(),
            tau_nnc: default_tau(),
            beta_max: default_beta_max(),
            temperature: default_temperature(),
            warmup_rounds: default_warmup(),
            seed: 0,
        }
    }

    /// Contradictions are rejected before any compute. Errors name the
    /// offending field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let fail = |field, msg: &str| Err((field, msg.to_string()));
        if self.num_clients == 0 {
            return fail("num_clients", "must be >= 1");
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return fail("participation_fraction", "must lie in (0, 1]");
        }
        if let Err(e) = self.train.validate() {
            return fail("train", &e.to_string());
        }
        if self.hidden_layers.contains(&0) {
            return fail("hidden_layers", "layer widths must be >= 1");
        }
        if self.k == 0 {
            return fail("k", "must be >= 1");
        }
        if !(0.0..=2.0).contains(&self.tau_nnc) {
            return fail("tau_nnc", "must lie in [0, 2]");
        }
        if !(0.0..=1.0).contains(&self.beta_max) {
            return fail("beta_max", "must lie in [0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", "must be positive");
        }
        if self.estimation_method.is_none() {
            if self.strategy == Strategy::NaFedavg {
                return fail("estimation_method", "na_fedavg needs an estimation method");
            }
            if self.local_loss == LocalLoss::Akd {
                return fail("estimation_method", "akd needs an estimation method");
            }
        }
        if self.estimation_method == Some(EstimationMethod::Confidence) {
            if self.warmup_rounds == 0 {
                return fail("warmup_rounds", "confidence estimation needs >= 1 warm-up round");
            }
            if self.warmup_rounds > self.rounds {
                return fail("warmup_rounds", "cannot exceed rounds");
            }
        }
        Ok(())
    }

    fn checked(&self) -> Result<()> {
        self.validate().map_err(|(field, message)| Error::Config {
            pointer: format!("/federated/{field}"),
            message,
        })
    }

    pub fn cohort_size(&self) -> usize {
        // Subtracting a hair keeps products like 0.3 * 10 from rounding up.
        let raw = (self.participation_fraction * self.num_clients as f64 - 1e-9).ceil();
        (raw as usize).clamp(1, self.num_clients)
    }

    fn layer_sizes(&self, dim: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![dim];
        sizes.extend(&self.hidden_layers);
        sizes.push(classes);
        sizes
    }
}

/// A client's private state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub data: DataView,
    pub estimate: Option<NoiseEstimate>,
}

impl ClientState {
    pub fn size(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub model: Mlp,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    /// `(client_id, mean epoch loss)` for the cohort.
    pub client_losses: Vec<(usize, f64)>,
    /// One weight per client in id order; zero for clients not selected.
    pub weights: Vec<f64>,
    pub mean_local_loss: f64,
    pub test_accuracy: f64,
    pub flags: Vec<String>,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl RoundReport {
    /// Copy with timing removed, for equality checks.
    pub fn timeless(&self) -> Self {
        Self {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}

/// How one round trains and aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundPlan {
    pub strategy: Strategy,
    pub local_loss: LocalLoss,
    pub warmup: bool,
}

impl RoundPlan {
    pub fn from_config(config: &FederatedConfig) -> Self {
        Self {
            strategy: config.strategy,
            local_loss: config.local_loss,
            warmup: false,
        }
    }

    fn warmup() -> Self {
        Self {
            strategy: Strategy::Fedavg,
            local_loss: LocalLoss::Ce,
            warmup: true,
        }
    }
}

/// Everything a round needs besides the global model.
pub struct RoundContext<'a> {
    pub config: &'a FederatedConfig,
    pub clients: &'a [ClientState],
    /// Server-held `n_hat` per client id.
    pub estimates: &'a BTreeMap<usize, f64>,
    pub test: &'a DataView,
    pub pool: &'a rayon::ThreadPool,
}

/// Seed of client `client_id`'s local training in round `round`.
pub fn client_train_seed(config_seed: u64, round: usize, client_id: usize) -> u64 {
    seed::hash64(config_seed, &[round as u64, client_id as u64])
}

/// Cohort for a round: seeded sampling without replacement, sorted ids.
pub fn select_clients(config: &FederatedConfig, clients: &[ClientState], round: usize) -> Vec<usize> {
    let mut rng = seed::derived_rng(config.seed, &[tag::SELECTION, round as u64]);
    let mut picked: Vec<usize> = index::sample(&mut rng, clients.len(), config.cohort_size().min(clients.len()))
        .into_iter()
        .collect();
    picked.sort_unstable();
    picked
}

pub fn run_round(
    global: &GlobalModel,
    ctx: &RoundContext<'_>,
    plan: RoundPlan,
) -> Result<(GlobalModel, RoundReport, Trace)> {
    let started = Instant::now();
    let config = ctx.config;
    let round = global.round + 1;
    let cohort = select_clients(config, ctx.clients, round);
    let mut trace = Trace::default();
    trace.push(Message::BroadcastParameters {
        num_parameters: global.model.num_parameters(),
    });

    let results: Vec<Result<(Mlp, Vec<f64>)>> = ctx.pool.install(|| {
        cohort
            .par_iter()
            .map(|&pos| {
                let client = &ctx.clients[pos];
                let train = TrainConfig {
                    seed: client_train_seed(config.seed, round, client.client_id),
                    ..config.train.clone()
                };
                let mix = match plan.local_loss {
                    LocalLoss::Ce => LossMix::cross_entropy(),
                    LocalLoss::Akd => {
                        let n_hat = client.estimate.as_ref().map(|e| e.n_hat).ok_or_else(|| {
                            Error::param("akd needs a local noise estimate")
                        })?;
                        akd_mix(n_hat, config.beta_max, config.temperature, &global.model)
                    }
                };
                train_local(&global.model, &client.data, &train, &mix)
            })
            .collect()
    });

    let mut updates = Vec::with_capacity(cohort.len());
    let mut client_losses = Vec::with_capacity(cohort.len());
    for (&pos, result) in cohort.iter().zip(results) {
        let client = &ctx.clients[pos];
        let (model, losses) = result.map_err(|e| Error::Client {
            client_id: client.client_id,
            source: Box::new(e),
        })?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        client_losses.push((client.client_id, mean_loss));
        trace.push(Message::UploadUpdate {
            client_id: client.client_id,
            sample_count: client.size(),
            num_parameters: model.num_parameters(),
        });
        updates.push(ClientUpdate {
            client_id: client.client_id,
            model,
            sample_count: client.size(),
            n_hat: ctx.estimates.get(&client.client_id).copied(),
        });
    }

    let agg = match plan.strategy {
        Strategy::Fedavg => fedavg_aggregate(&updates)?,
        Strategy::NaFedavg => na_fedavg_aggregate(&updates)?,
    };
    let mut flags = Vec::new();
    if plan.warmup {
        flags.push("warmup".to_string());
    }
    if agg.fallback {
        flags.push("na_fallback".to_string());
    }

    let mut weights = vec![0.0; ctx.clients.len()];
    for (&pos, &w) in cohort.iter().zip(&agg.weights) {
        weights[pos] = w;
    }
    let test_accuracy = agg.model.accuracy(&ctx.test.features, &ctx.test.labels)?;
    let mean_local_loss =
        client_losses.iter().map(|(_, l)| l).sum::<f64>() / client_losses.len() as f64;
    let report = RoundReport {
        round,
        selected: cohort.iter().map(|&p| ctx.clients[p].client_id).collect(),
        client_losses,
        weights,
        mean_local_loss,
        test_accuracy,
        flags,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((
        GlobalModel {
            model: agg.model,
            round,
        },
        report,
        trace,
    ))
}

/// Per-client line of the experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub sample_count: usize,
    /// Level of the client's injected noise matrix.
    pub injected_level: f64,
    /// Observed fraction of corrupted labels (oracle datasets only).
    pub realized_noise: Option<f64>,
    pub n_hat: Option<f64>,
    pub estimation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub worst_accuracy: f64,
    pub worst_round: usize,
    pub estimation_method: Option<EstimationMethod>,
    /// Mean `|n_hat - injected level|` (oracle datasets only).
    pub estimation_mae: Option<f64>,
    pub clients: Vec<ClientSummary>,
    pub nnc: Vec<NncStats>,
    pub fallback_rounds: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub model: Mlp,
    /// Full message log of the run.
    pub trace: Trace,
    /// The estimation round's messages alone.
    pub estimation_trace: Option<Trace>,
}

/// Runtime knobs that never affect results.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))
}

/// Full pipeline: corrupt labels, optionally correct them, optionally
/// estimate noise, then train. With confidence estimation the first
/// `warmup_rounds` rounds run plain FedAvg and the estimate is taken on the
/// resulting global model.
pub fn run_experiment(
    config: &FederatedConfig,
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    partition: &PartitionMap,
    profiles: &[ClientNoiseProfile],
    corruption_seed: u64,
    options: RunOptions,
) -> Result<ExperimentOutput> {
    config.checked()?;
    partition.check(train.len())?;
    let noisy = corrupt_clients(train, partition, profiles, corruption_seed)?;
    run_corrupted(config, &noisy, test, partition, profiles, options)
}

/// Everything after label corruption. `noisy` carries the observed labels
/// clients train on; its true labels feed evaluation metrics only.
/// `profiles` supply the injected levels reported in the summary.
pub fn run_corrupted(
    config: &FederatedConfig,
    noisy: &EmbeddingDataset,
    test: &EmbeddingDataset,
    partition: &PartitionMap,
    profiles: &[ClientNoiseProfile],
    options: RunOptions,
) -> Result<ExperimentOutput> {
    config.checked()?;
    if noisy.dim != test.dim || noisy.num_classes != test.num_classes {
        return Err(Error::param("train and test splits disagree on shape"));
    }
    if partition.num_clients() != config.num_clients {
        return Err(Error::param(format!(
            "partition has {} clients, config expects {}",
            partition.num_clients(),
            config.num_clients
        )));
    }
    partition.check(noisy.len())?;
    let pool = thread_pool(options.workers)?;
    let mut clients: Vec<ClientState> = partition
        .assignments
        .iter()
        .map(|(&client_id, idx)| ClientState {
            client_id,
            data: noisy.view_of(idx),
            estimate: None,
        })
        .collect();
    // Evaluation-only ground truth, never handed to clients or the server.
    let oracle: BTreeMap<usize, Option<Vec<usize>>> = partition
        .assignments
        .iter()
        .map(|(&id, idx)| (id, noisy.oracle_labels(idx)))
        .collect();

    let mut trace = Trace::default();
    let mut estimation_trace = None;
    let mut estimates: BTreeMap<usize, f64> = BTreeMap::new();
    let mut estimation_errors: BTreeMap<usize, String> = BTreeMap::new();
    let knn = KnnOptions {
        k: config.k,
        metric: config.knn_metric,
    };
    if config.estimation_method == Some(EstimationMethod::Knn) {
        let views: Vec<(usize, &DataView)> = clients.iter().map(|c| (c.client_id, &c.data)).collect();
        let round = pool.install(|| estimation_round(&views, EstimationMethod::Knn, knn, None))?;
        trace.extend(round.trace.clone());
        estimation_trace = Some(absorb(round, &mut clients, &mut estimates, &mut estimation_errors));
    }

    let mut nnc = Vec::new();
    if config.init_correction == InitCorrection::Nnc {
        let results: Vec<Result<(DataView, NncStats)>> = pool.install(|| {
            clients
                .par_iter()
                .map(|c| {
                    let truth = oracle[&c.client_id].as_deref();
                    match &c.estimate {
                        Some(est) if est.method == EstimationMethod::Knn => {
                            Ok(nnc_correct(&c.data, est, config.tau_nnc, truth))
                        }
                        _ => nnc_apply(c.client_id, &c.data, config.k, config.knn_metric, config.tau_nnc, truth),
                    }
                })
                .collect()
        });
        for (client, result) in clients.iter_mut().zip(results) {
            let (data, stats) = result.map_err(|e| Error::Client {
                client_id: client.client_id,
                source: Box::new(e),
            })?;
            client.data = data;
            nnc.push(stats);
        }
    }

    let sizes = config.layer_sizes(noisy.dim, noisy.num_classes);
    let init_seed = seed::hash64(config.seed, &[tag::MODEL_INIT]);
    let mut global = GlobalModel {
        model: init_weights(&sizes, init_seed)?,
        round: 0,
    };
    let test_view = test.view();
    let mut reports = Vec::with_capacity(config.rounds);
    let warmup = match config.estimation_method {
        Some(EstimationMethod::Confidence) => config.warmup_rounds,
        _ => 0,
    };

    for r in 1..=config.rounds {
        let plan = if r <= warmup {
            RoundPlan::warmup()
        } else {
            RoundPlan::from_config(config)
        };
        let ctx = RoundContext {
            config,
            clients: &clients,
            estimates: &estimates,
            test: &test_view,
            pool: &pool,
        };
        let (next, report, round_trace) = run_round(&global, &ctx, plan)?;
        global = next;
        reports.push(report);
        trace.extend(round_trace);

        if r == warmup {
            let views: Vec<(usize, &DataView)> = clients.iter().map(|c| (c.client_id, &c.data)).collect();
            let round = pool.install(|| {
                estimation_round(&views, EstimationMethod::Confidence, knn, Some(&global.model))
            })?;
            trace.extend(round.trace.clone());
            estimation_trace = Some(absorb(round, &mut clients, &mut estimates, &mut estimation_errors));
        }
    }

    let clients_summary: Vec<ClientSummary> = clients
        .iter()
        .map(|c| {
            let profile = profiles.iter().find(|p| p.client_id == c.client_id);
            let indices = partition.indices(c.client_id).unwrap_or(&[]);
            let realized = oracle[&c.client_id].as_ref().map(|truth| {
                let wrong = indices
                    .iter()
                    .zip(truth)
                    .filter(|(&i, &t)| noisy.examples[i].observed_label != t)
                    .count();
                wrong as f64 / indices.len().max(1) as f64
            });
            ClientSummary {
                client_id: c.client_id,
                sample_count: c.size(),
                injected_level: profile.map_or(0.0, |p| measure_noise_level(&p.matrix)),
                realized_noise: realized,
                n_hat: estimates.get(&c.client_id).copied(),
                estimation_error: estimation_errors.get(&c.client_id).cloned(),
            }
        })
        .collect();
    let estimation_mae = (noisy.has_oracle && !estimates.is_empty()).then(|| {
        let errs: Vec<f64> = clients_summary
            .iter()
            .filter_map(|c| c.n_hat.map(|n| (n - c.injected_level).abs()))
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    });

    let summary = summarize(&reports, config, clients_summary, estimation_mae, nnc);
    Ok(ExperimentOutput {
        reports,
        summary,
        model: global.model,
        trace,
        estimation_trace,
    })
}

/// Store server-side scalars and client-local estimates; returns the round's trace.
fn absorb(
    round: EstimationRound,
    clients: &mut [ClientState],
    estimates: &mut BTreeMap<usize, f64>,
    errors: &mut BTreeMap<usize, String>,
) -> Trace {
    for ((report, local), client) in round.reports.iter().zip(round.local).zip(clients.iter_mut()) {
        match report.n_hat {
            Some(n_hat) => {
                estimates.insert(report.client_id, n_hat);
            }
            None => {
                errors.insert(report.client_id, report.error.clone().unwrap_or_default());
            }
        }
        client.estimate = local;
    }
    round.trace
}

fn summarize(
    reports: &[RoundReport],
    config: &FederatedConfig,
    clients: Vec<ClientSummary>,
    estimation_mae: Option<f64>,
    nnc: Vec<NncStats>,
) -> Summary {
    let mut best = (f64::NEG_INFINITY, 0);
    let mut worst = (f64::INFINITY, 0);
    for r in reports {
        if r.test_accuracy > best.0 {
            best = (r.test_accuracy, r.round);
        }
        if r.test_accuracy < worst.0 {
            worst = (r.test_accuracy, r.round);
        }
    }
    if reports.is_empty() {
        best = (0.0, 0);
        worst = (0.0, 0);
    }
    Summary {
        final_accuracy: reports.last().map_or(0.0, |r| r.test_accuracy),
        best_accuracy: best.0,
        best_round: best.1,
        worst_accuracy: worst.0,
        worst_round: worst.1,
        estimation_method: config.estimation_method,
        estimation_mae,
        clients,
        nnc,
        fallback_rounds: reports
            .iter()
            .filter(|r| r.flags.iter().any(|f| f == "na_fallback"))
            .map(|r| r.round)
            .collect(),
    }
}

/// Round stream as CSV: `round,selected_ids,weights,mean_local_loss,test_accuracy,flags`.
pub fn rounds_to_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,selected_ids,weights,mean_local_loss,test_accuracy,flags\n");
    for r in reports {
        let ids: Vec<String> = r.selected.iter().map(ToString::to_string).collect();
        let weights: Vec<String> = r.weights.iter().map(ToString::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            ids.join(";"),
            weights.join(";"),
            r.mean_local_loss,
            r.test_accuracy,
            r.flags.join(";")
        )
        .unwrap();
    }
    out
}
