//! Scenario-driven pipelines behind the `fedln` command line, and the files
//! they write.
//!
//! Every artifact embeds the resolved scenario: JSON outputs carry it under
//! a `scenario` key, CSV outputs start with a `# scenario: {...}` comment
//! line. Nothing time-dependent is written, so re-running a command
//! reproduces its files byte for byte.

pub mod cli;
mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::{corrupt_clients, save_dataset};
use crate::error::{Error, Result};
use crate::estimation::EstimationMethod;
use crate::fed::{
    rounds_to_csv, run_experiment, ExperimentOutput, InitCorrection, LocalLoss, RunOptions,
    Strategy, Summary,
};
use crate::model::checkpoint_to_json;

pub use scenario::{
    load_scenario, ClientNoise, DatasetSource, FileSource, NoisePlan, PartitionSpec, Scenario,
    SyntheticSource, SEED_ENV,
};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn scenario_comment(scenario: &Scenario) -> String {
    let compact = serde_json::to_string(scenario).expect("scenario serializes");
    format!("# scenario: {compact}\n")
}

#[derive(Serialize)]
struct WithScenario<'a, T: Serialize> {
    scenario: &'a Scenario,
    #[serde(flatten)]
    body: T,
}

fn json_with_scenario<T: Serialize>(scenario: &Scenario, body: T) -> String {
    let mut s = serde_json::to_string_pretty(&WithScenario { scenario, body }).expect("serializes");
    s.push('\n');
    s
}

/// Write `train.flne` and `test.flne`.
pub fn gen_data(scenario: &Scenario, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, test) = scenario.datasets()?;
    let paths = vec![out.join("train.flne"), out.join("test.flne")];
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    save_dataset(&train, &paths[0])?;
    save_dataset(&test, &paths[1])?;
    write(&out.join("scenario.json"), scenario.to_json() + "\n")?;
    Ok(paths)
}

#[derive(Serialize)]
struct NoiseManifest {
    partition: BTreeMap<usize, usize>,
    clients: Vec<ClientManifest>,
}

#[derive(Serialize)]
struct ClientManifest {
    client_id: usize,
    spec: Option<crate::noise::NoiseSpec>,
    matrix_file: String,
    measured_level: f64,
    measured_sparsity: crate::noise::Sparsity,
}

/// Corrupt the training split and write it with the realized matrices.
pub fn inject_noise(scenario: &Scenario, out: &Path) -> Result<()> {
    let (train, test) = scenario.datasets()?;
    let partition = scenario.partition(&train)?;
    let profiles = scenario.profiles(train.num_classes)?;
    let noisy = corrupt_clients(&train, &partition, &profiles, scenario.corruption_seed())?;
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    save_dataset(&noisy, out.join("train_noisy.flne"))?;
    save_dataset(&test, out.join("test.flne"))?;

    let specs = scenario.client_noise_specs(train.num_classes);
    let mut clients = Vec::new();
    for (profile, (_, spec)) in profiles.iter().zip(specs) {
        let file = format!("matrices/client_{}.csv", profile.client_id);
        write(&out.join(&file), profile.matrix.to_csv())?;
        clients.push(ClientManifest {
            client_id: profile.client_id,
            spec,
            matrix_file: file,
            measured_level: crate::noise::measure_noise_level(&profile.matrix),
            measured_sparsity: crate::noise::measure_noise_sparsity(&profile.matrix),
        });
    }
    let manifest = NoiseManifest {
        partition: partition
            .assignments
            .iter()
            .map(|(&c, idx)| (c, idx.len()))
            .collect(),
        clients,
    };
    write(&out.join("noise.json"), json_with_scenario(scenario, manifest))?;
    write(
        &out.join("partition.json"),
        serde_json::to_string(&partition)? + "\n",
    )?;
    Ok(())
}

/// Federated config for a one-round estimation run.
pub fn estimation_config(scenario: &Scenario, method: EstimationMethod) -> Scenario {
    let mut s = scenario.clone();
    let f = &mut s.federated;
    f.estimation_method = Some(method);
    f.strategy = Strategy::Fedavg;
    f.local_loss = LocalLoss::Ce;
    f.init_correction = InitCorrection::None;
    f.rounds = match method {
        EstimationMethod::Knn => 0,
        EstimationMethod::Confidence => f.warmup_rounds,
    };
    s
}

/// Run warm-up (confidence only) plus the estimation round.
pub fn run_estimation(
    scenario: &Scenario,
    method: EstimationMethod,
    options: RunOptions,
) -> Result<(Scenario, ExperimentOutput)> {
    let s = estimation_config(scenario, method);
    let out = run_scenario(&s, options)?;
    Ok((s, out))
}

/// `client_id,method,n_hat,sample_count,flagged_count`
pub fn estimation_csv(scenario: &Scenario, summary: &Summary) -> String {
    let method = summary.estimation_method.map_or("none", EstimationMethod::as_str);
    let mut out = scenario_comment(scenario);
    out.push_str("client_id,method,n_hat,sample_count,flagged_count\n");
    for c in &summary.clients {
        let (n_hat, flagged) = match c.n_hat {
            Some(n) => (n.to_string(), ((n * c.sample_count as f64).round() as usize).to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(out, "{},{method},{n_hat},{},{flagged}", c.client_id, c.sample_count).unwrap();
    }
    out
}

pub fn write_estimation(scenario: &Scenario, output: &ExperimentOutput, out: &Path) -> Result<()> {
    let summary = &output.summary;
    write(&out.join("estimation.csv"), estimation_csv(scenario, summary))?;
    #[derive(Serialize)]
    struct Body<'a> {
        estimation_mae: Option<f64>,
        clients: &'a [crate::fed::ClientSummary],
    }
    write(
        &out.join("estimation.json"),
        json_with_scenario(
            scenario,
            Body {
                estimation_mae: summary.estimation_mae,
                clients: &summary.clients,
            },
        ),
    )
}

pub fn run_scenario(scenario: &Scenario, options: RunOptions) -> Result<ExperimentOutput> {
    let (train, test) = scenario.datasets()?;
    let partition = scenario.partition(&train)?;
    let profiles = scenario.profiles(train.num_classes)?;
    run_experiment(
        &scenario.federated,
        &train,
        &test,
        &partition,
        &profiles,
        scenario.corruption_seed(),
        options,
    )
}

pub fn rounds_csv(scenario: &Scenario, output: &ExperimentOutput) -> String {
    scenario_comment(scenario) + &rounds_to_csv(&output.reports)
}

pub fn summary_json(scenario: &Scenario, output: &ExperimentOutput) -> String {
    json_with_scenario(scenario, &output.summary)
}

/// Write `<prefix>rounds.csv`, `<prefix>summary.json` and `<prefix>model.json`.
pub fn write_training(
    scenario: &Scenario,
    output: &ExperimentOutput,
    out: &Path,
    prefix: &str,
) -> Result<()> {
    write(&out.join(format!("{prefix}rounds.csv")), rounds_csv(scenario, output))?;
    write(&out.join(format!("{prefix}summary.json")), summary_json(scenario, output))?;
    write(
        &out.join(format!("{prefix}model.json")),
        checkpoint_to_json(&output.model) + "\n",
    )
}

/// Long-format `scenario_id,round,metric,value` rows from a round CSV.
pub fn long_format(scenario_id: &str, rounds_csv: &str) -> Result<String> {
    let mut out = String::new();
    let mut lines = rounds_csv.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap_or_default();
    if header != "round,selected_ids,weights,mean_local_loss,test_accuracy,flags" {
        return Err(Error::Csv {
            line: 1,
            reason: format!("not a round CSV header: {header:?}"),
        });
    }
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Csv {
                line: k as u64 + 2,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let round = fields[0];
        writeln!(out, "{scenario_id},{round},test_accuracy,{}", fields[4]).unwrap();
        writeln!(out, "{scenario_id},{round},mean_local_loss,{}", fields[3]).unwrap();
        for (client, w) in fields[2].split(';').enumerate() {
            writeln!(out, "{scenario_id},{round},weight_client_{client},{w}").unwrap();
        }
    }
    Ok(out)
}

/// Collect every `rounds.csv` / `*.rounds.csv` under `input` into one
/// long-format CSV. The scenario id is the file prefix, or the directory
/// name for a bare `rounds.csv`.
pub fn report(input: &Path, out_file: &Path) -> Result<usize> {
    let mut found: Vec<(String, PathBuf)> = Vec::new();
    let mut stack = vec![input.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::file(&dir, e))? {
            let path = entry.map_err(|e| Error::file(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name == "rounds.csv" {
                let id = dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("scenario")
                    .to_string();
                found.push((id, path));
            } else if let Some(id) = name.strip_suffix(".rounds.csv") {
                found.push((id.to_string(), path));
            }
        }
    }
    found.sort();
    let mut body = String::from("scenario_id,round,metric,value\n");
    for (id, path) in &found {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        body.push_str(&long_format(id, &text)?);
    }
    write(out_file, body)?;
    Ok(found.len())
}

/// Named intervention bundles used by `sweep`.
pub fn apply_strategy(scenario: &mut Scenario, name: &str) -> Result<()> {
    let f = &mut scenario.federated;
    let method = f.estimation_method.unwrap_or(EstimationMethod::Knn);
    let (init, loss, strategy, estimation) = match name {
        "fedavg" => (InitCorrection::None, LocalLoss::Ce, Strategy::Fedavg, None),
        "nnc" => (InitCorrection::Nnc, LocalLoss::Ce, Strategy::Fedavg, None),
        "na_fedavg" => (InitCorrection::None, LocalLoss::Ce, Strategy::NaFedavg, Some(method)),
        "akd" => (InitCorrection::None, LocalLoss::Akd, Strategy::Fedavg, Some(method)),
        "fedln" => (InitCorrection::Nnc, LocalLoss::Ce, Strategy::NaFedavg, Some(method)),
        "fedln_full" => (InitCorrection::Nnc, LocalLoss::Akd, Strategy::NaFedavg, Some(method)),
        other => {
            return Err(Error::Config {
                pointer: "--strategies".into(),
                message: format!(
                    "unknown strategy {other:?}; expected fedavg, nnc, na_fedavg, akd, fedln or fedln_full"
                ),
            })
        }
    };
    f.init_correction = init;
    f.local_loss = loss;
    f.strategy = strategy;
    f.estimation_method = estimation;
    Ok(())
}

/// One axis value of a sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridAxis {
    NoiseLevel,
    NoiseSparsity,
    NoisyClientFraction,
}

impl GridAxis {
    pub fn parse(key: &str) -> Option<Self> {
        match key {
            "nl" => Some(GridAxis::NoiseLevel),
            "ns" => Some(GridAxis::NoiseSparsity),
            "frac" => Some(GridAxis::NoisyClientFraction),
            _ => None,
        }
    }

    fn key(self) -> &'static str {
        match self {
            GridAxis::NoiseLevel => "nl",
            GridAxis::NoiseSparsity => "ns",
            GridAxis::NoisyClientFraction => "frac",
        }
    }

    fn apply(self, scenario: &mut Scenario, value: f64) {
        match self {
            GridAxis::NoiseLevel => scenario.noise.noise_level = value,
            GridAxis::NoiseSparsity => scenario.noise.noise_sparsity = value,
            GridAxis::NoisyClientFraction => scenario.noise.noisy_client_fraction = value,
        }
    }
}

/// One sweep cell: its id and fully resolved scenario.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub id: String,
    pub scenario: Scenario,
}

/// Expand the grid in axis order, then strategy, then seed. A cell's
/// scenario depends only on its own coordinates.
pub fn sweep_cells(
    base: &Scenario,
    grid: &[(GridAxis, Vec<f64>)],
    strategies: &[String],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    let mut points: Vec<(String, Scenario)> = vec![(String::new(), base.clone())];
    for (axis, values) in grid {
        let mut next = Vec::new();
        for (id, s) in &points {
            for &v in values {
                let mut s = s.clone();
                axis.apply(&mut s, v);
                let sep = if id.is_empty() { "" } else { "_" };
                next.push((format!("{id}{sep}{}{v}", axis.key()), s));
            }
        }
        points = next;
    }
    let mut cells = Vec::new();
    for (id, s) in points {
        for strategy in strategies {
            for &seed in seeds {
                let mut scenario = s.clone();
                apply_strategy(&mut scenario, strategy)?;
                scenario.seed = seed;
                let sep = if id.is_empty() { "" } else { "_" };
                scenario.name = format!("{id}{sep}{strategy}_seed{seed}");
                let scenario = scenario.resolved();
                scenario.validate()?;
                cells.push(SweepCell {
                    id: scenario.name.clone(),
                    scenario,
                });
            }
        }
    }
    Ok(cells)
}

/// Run every cell and write `<id>.rounds.csv` and `<id>.summary.json`.
/// `jobs > 1` runs cells concurrently; files are identical either way.
pub fn sweep(cells: &[SweepCell], out: &Path, jobs: usize, workers: usize) -> Result<()> {
    use rayon::prelude::*;
    let run = |cell: &SweepCell| -> Result<()> {
        let output = run_scenario(&cell.scenario, RunOptions { workers })?;
        write(
            &out.join(format!("{}.rounds.csv", cell.id)),
            rounds_csv(&cell.scenario, &output),
        )?;
        write(
            &out.join(format!("{}.summary.json", cell.id)),
            summary_json(&cell.scenario, &output),
        )
    };
    if jobs <= 1 {
        cells.iter().try_for_each(run)
    } else {
        let pool = crate::fed::thread_pool(jobs)?;
        pool.install(|| cells.par_iter().try_for_each(run))
    }
}
