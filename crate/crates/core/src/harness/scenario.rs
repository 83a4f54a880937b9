//! Scenario documents: strict JSON, defaults filled in, validated with
//! JSON-pointer error locations.

use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_gaussian_mixture, load_dataset, partition_dirichlet, partition_iid, EmbeddingDataset,
    PartitionMap, Split, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fed::FederatedConfig;
use crate::noise::{build_noise_matrix, ClientNoiseProfile, NoiseMatrix, NoiseSpec, NoiseStructure};
use crate::seed::{self, tag};

/// Environment variable that replaces the scenario's master seed.
pub const SEED_ENV: &str = "FEDLN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed; every other seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub partition: PartitionSpec,
    pub noise: NoisePlan,
    pub federated: FederatedConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSource),
    Files(FileSource),
}

/// Gaussian mixture parameters; the seed comes from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    #[default]
    Iid,
    Dirichlet { alpha: f64 },
}

fn default_fraction() -> f64 {
    1.0
}

fn default_structure() -> NoiseStructure {
    NoiseStructure::Uniform
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePlan {
    pub noise_level: f64,
    #[serde(default)]
    pub noise_sparsity: f64,
    #[serde(default = "default_structure")]
    pub structure: NoiseStructure,
    /// Share of clients that receive the noise; the rest stay clean.
    #[serde(default = "default_fraction")]
    pub noisy_client_fraction: f64,
    /// Explicit per-client settings, applied after the global plan.
    #[serde(default)]
    pub per_client: Vec<ClientNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientNoise {
    pub client_id: usize,
    pub noise_level: f64,
    #[serde(default)]
    pub noise_sparsity: f64,
    #[serde(default = "default_structure")]
    pub structure: NoiseStructure,
}

fn config_error(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// `a.b[2].c` -> `/a/b/2/c`
fn to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(key),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl Scenario {
    /// Parse and validate a scenario document.
    pub fn from_json(text: &str) -> Result<Self> {
        let scenario = Self::parse(text)?;
        scenario.validate()?;
        Ok(scenario.resolved())
    }

    fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = to_pointer(e.path());
            config_error(pointer, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, pointer: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(config_error(pointer, format!("{v} is outside [0, 1]")))
            }
        };
        unit(self.noise.noise_level, "/noise/noise_level")?;
        unit(self.noise.noise_sparsity, "/noise/noise_sparsity")?;
        unit(self.noise.noisy_client_fraction, "/noise/noisy_client_fraction")?;
        let m = self.federated.num_clients;
        for (i, c) in self.noise.per_client.iter().enumerate() {
            unit(c.noise_level, &format!("/noise/per_client/{i}/noise_level"))?;
            unit(c.noise_sparsity, &format!("/noise/per_client/{i}/noise_sparsity"))?;
            if c.client_id >= m {
                return Err(config_error(
                    format!("/noise/per_client/{i}/client_id"),
                    format!("client {} does not exist (num_clients = {m})", c.client_id),
                ));
            }
        }
        if let PartitionSpec::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(config_error("/partition/alpha", "must be positive"));
            }
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                self.synthetic_spec(s)
                    .validate()
                    .map_err(|e| config_error("/dataset/synthetic", e.to_string()))?;
            }
            DatasetSource::Files(f) => {
                for (key, path) in [("train", &f.train), ("test", &f.test)] {
                    if !path.exists() {
                        return Err(config_error(
                            format!("/dataset/files/{key}"),
                            format!("{} does not exist", path.display()),
                        ));
                    }
                }
            }
        }
        self.federated
            .validate()
            .map_err(|(field, msg)| config_error(format!("/federated/{field}"), msg))?;
        Ok(())
    }

    /// Apply `FEDLN_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| config_error("/seed", format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(self.resolved())
    }

    /// Fill derived fields so the echoed document reproduces the run alone.
    pub fn resolved(mut self) -> Self {
        self.federated.seed = seed::hash64(self.seed, &[tag::FEDERATED]);
        self
    }

    fn synthetic_spec(&self, s: &SyntheticSource) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: s.num_classes,
            dim: s.dim,
            per_class_count: s.per_class_count,
            separation: s.separation,
            seed: seed::hash64(self.seed, &[tag::DATA]),
        }
    }

    /// Generate or load the train and test splits.
    pub fn datasets(&self) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => generate_gaussian_mixture(&self.synthetic_spec(s)),
            DatasetSource::Files(f) => {
                let train = load_dataset(&f.train)?;
                let mut test = load_dataset(&f.test)?;
                test.split = Split::Test;
                test.validate()?;
                Ok((train, test))
            }
        }
    }

    pub fn partition(&self, train: &EmbeddingDataset) -> Result<PartitionMap> {
        let seed = seed::hash64(self.seed, &[tag::PARTITION]);
        let m = self.federated.num_clients;
        match self.partition {
            PartitionSpec::Iid => partition_iid(train.len(), m, seed),
            PartitionSpec::Dirichlet { alpha } => {
                partition_dirichlet(&train.true_labels(), m, alpha, seed)
            }
        }
    }

    /// Ids of the clients that receive the global noise plan.
    pub fn noisy_clients(&self) -> Vec<usize> {
        let m = self.federated.num_clients;
        let count = ((self.noise.noisy_client_fraction * m as f64).round() as usize).min(m);
        let mut rng = seed::derived_rng(self.seed, &[tag::NOISY_CLIENTS]);
        let mut ids: Vec<usize> = index::sample(&mut rng, m, count).into_iter().collect();
        ids.sort_unstable();
        ids
    }

    /// Noise spec of every client; `None` means clean.
    pub fn client_noise_specs(&self, num_classes: usize) -> Vec<(usize, Option<NoiseSpec>)> {
        let noisy = self.noisy_clients();
        (0..self.federated.num_clients)
            .map(|id| {
                let matrix_seed = seed::hash64(self.seed, &[tag::NOISE_MATRIX, id as u64]);
                let spec = |level, sparsity, structure| NoiseSpec {
                    num_classes,
                    noise_level: level,
                    noise_sparsity: sparsity,
                    structure,
                    seed: matrix_seed,
                };
                let over = self.noise.per_client.iter().rev().find(|c| c.client_id == id);
                let chosen = match over {
                    Some(c) => Some(spec(c.noise_level, c.noise_sparsity, c.structure)),
                    None if noisy.contains(&id) => Some(spec(
                        self.noise.noise_level,
                        self.noise.noise_sparsity,
                        self.noise.structure,
                    )),
                    None => None,
                };
                (id, chosen)
            })
            .collect()
    }

    pub fn profiles(&self, num_classes: usize) -> Result<Vec<ClientNoiseProfile>> {
        self.client_noise_specs(num_classes)
            .into_iter()
            .map(|(client_id, spec)| {
                let matrix = match spec {
                    Some(s) => build_noise_matrix(&s)?,
                    None => NoiseMatrix::identity(num_classes),
                };
                Ok(ClientNoiseProfile { client_id, matrix })
            })
            .collect()
    }

    pub fn corruption_seed(&self) -> u64 {
        seed::hash64(self.seed, &[tag::CORRUPTION])
    }
}

/// Read, parse, validate, apply `FEDLN_SEED`, and resolve derived fields.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut scenario = Scenario::parse(&text)?;
    // Relative dataset paths are relative to the scenario file.
    if let DatasetSource::Files(f) = &mut scenario.dataset {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut f.train, &mut f.test] {
            if p.is_relative() && !p.exists() {
                *p = base.join(&*p);
            }
        }
    }
    scenario.validate()?;
    scenario.with_env_seed()
}
