//! Embedding datasets, client partitions and per-client label corruption.
//!
//! Training code never sees an [`EmbeddingDataset`] directly. Clients receive
//! a [`DataView`], which carries features and observed labels only; true
//! labels stay behind in the dataset and are read back solely for
//! evaluation.

mod io;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{apply_noise, ClientNoiseProfile};
use crate::seed;

pub use io::{load_dataset, parse_csv, parse_flne, save_dataset, to_csv, to_flne};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f32>,
    pub observed_label: usize,
    /// Ground truth. Evaluation only.
    pub true_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub split: Split,
    /// False when the source carried no ground truth; `true_label` then
    /// mirrors `observed_label` and oracle metrics are disabled.
    pub has_oracle: bool,
    pub examples: Vec<Example>,
}

impl EmbeddingDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.observed_label).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.true_label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes < 2 {
            return Err(Error::param(format!(
                "dataset needs dim >= 1 and >= 2 classes (dim {}, classes {})",
                self.dim, self.num_classes
            )));
        }
        for (k, e) in self.examples.iter().enumerate() {
            if e.features.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    location: format!("record {k}"),
                    expected: self.dim,
                    found: e.features.len(),
                });
            }
            for label in [e.observed_label, e.true_label] {
                if label >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        record: k,
                        label,
                        num_classes: self.num_classes,
                    });
                }
            }
            if self.split == Split::Test && e.observed_label != e.true_label {
                return Err(Error::param(format!(
                    "test split record {k} has a corrupted label"
                )));
            }
        }
        Ok(())
    }

    /// Features and observed labels of the whole dataset.
    pub fn view(&self) -> DataView {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.view_of(&indices)
    }

    /// Features and observed labels for a subset, in index order.
    pub fn view_of(&self, indices: &[usize]) -> DataView {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.examples[i];
            features.extend(e.features.iter().map(|&v| v as f64));
            labels.push(e.observed_label);
        }
        DataView {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }

    /// True labels for a subset, or `None` for no-oracle datasets.
    pub fn oracle_labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.has_oracle
            .then(|| indices.iter().map(|&i| self.examples[i].true_label).collect())
    }
}

/// Row-major features plus observed labels. What a client holds.
#[derive(Debug, Clone, PartialEq)]
pub struct DataView {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DataView {
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                location: "data view features".into(),
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if let Some((k, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                record: k,
                label,
                num_classes,
            });
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("synthetic data needs >= 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::param("synthetic data needs dim >= 2"));
        }
        if self.per_class_count == 0 {
            return Err(Error::param("per_class_count must be >= 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::param("separation must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian classes with means placed uniformly on the sphere of
/// radius `separation`. Test sets get `ceil(per_class_count / 5)` samples per
/// class. Labels are clean on output.
pub fn generate_gaussian_mixture(
    spec: &SyntheticSpec,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm * spec.separation).collect()
        })
        .collect();

    let mut draw = |count: usize, split: Split| {
        let mut examples = Vec::with_capacity(count * spec.num_classes);
        for _ in 0..count {
            for (class, mean) in means.iter().enumerate() {
                let features = mean
                    .iter()
                    .map(|m| (m + rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                examples.push(Example {
                    features,
                    observed_label: class,
                    true_label: class,
                });
            }
        }
        EmbeddingDataset {
            dim: spec.dim,
            num_classes: spec.num_classes,
            split,
            has_oracle: true,
            examples,
        }
    };
    let train = draw(spec.per_class_count, Split::Train);
    let test = draw(spec.per_class_count.div_ceil(5), Split::Test);
    Ok((train, test))
}

/// Client id to sorted indices into the train split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMap {
    pub assignments: BTreeMap<usize, Vec<usize>>,
}

impl PartitionMap {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn indices(&self, client_id: usize) -> Option<&[usize]> {
        self.assignments.get(&client_id).map(Vec::as_slice)
    }

    /// Disjointness, coverage of `0..n`, and no empty client.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (&client, idx) in &self.assignments {
            if idx.is_empty() {
                return Err(Error::param(format!("client {client} holds no samples")));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::param(format!(
                        "index {i} is out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::param(format!("index {i} is not assigned"))),
            None => Ok(()),
        }
    }
}

/// Seeded shuffle, then contiguous chunks. The first `n % num_clients`
/// clients get one extra sample.
pub fn partition_iid(n: usize, num_clients: usize, seed: u64) -> Result<PartitionMap> {
    if num_clients == 0 || num_clients > n {
        return Err(Error::param(format!(
            "cannot split {n} samples over {num_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let base = n / num_clients;
    let extra = n % num_clients;
    let mut assignments = BTreeMap::new();
    let mut start = 0;
    for client in 0..num_clients {
        let len = base + usize::from(client < extra);
        let mut idx = order[start..start + len].to_vec();
        idx.sort_unstable();
        assignments.insert(client, idx);
        start += len;
    }
    Ok(PartitionMap { assignments })
}

pub const DIRICHLET_ATTEMPTS: usize = 100;

/// Label-skewed split: for every class, client shares are drawn from a
/// symmetric Dirichlet(alpha) and rounded with largest remainders. Draws that
/// leave a client empty are retried.
pub fn partition_dirichlet(
    labels: &[usize],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionMap> {
    if num_clients == 0 {
        return Err(Error::param("num_clients must be >= 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    if labels.len() < num_clients {
        return Err(Error::param(format!(
            "cannot split {} samples over {num_clients} clients",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = seed::rng(seed);

    for _ in 0..DIRICHLET_ATTEMPTS {
        let mut buckets = vec![Vec::new(); num_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut shares: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = shares.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                // Every gamma draw underflowed; put the class on one client.
                shares.iter_mut().for_each(|s| *s = 0.0);
                shares[rng.gen_range(0..num_clients)] = 1.0;
            } else {
                shares.iter_mut().for_each(|s| *s /= total);
            }
            let counts = largest_remainder(&shares, members.len());
            let mut start = 0;
            for (client, &count) in counts.iter().enumerate() {
                buckets[client].extend_from_slice(&members[start..start + count]);
                start += count;
            }
        }
        if buckets.iter().all(|b| !b.is_empty()) {
            let assignments = buckets
                .into_iter()
                .enumerate()
                .map(|(c, mut idx)| {
                    idx.sort_unstable();
                    (c, idx)
                })
                .collect();
            return Ok(PartitionMap { assignments });
        }
    }
    Err(Error::param(format!(
        "no Dirichlet(alpha = {alpha}) draw gave every one of {num_clients} clients a sample \
         after {DIRICHLET_ATTEMPTS} attempts; use a larger alpha or fewer clients"
    )))
}

/// Integer counts summing to `total`, proportional to `shares`. Remainders
/// go to the largest fractional parts, ties to the lower index.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Re-draw every client's observed labels from its true labels through the
/// client's matrix. Client `m` uses sub-seed `hash64(seed, m)`. Indices
/// outside the partition are left alone.
pub fn corrupt_clients(
    train: &EmbeddingDataset,
    partition: &PartitionMap,
    profiles: &[ClientNoiseProfile],
    seed: u64,
) -> Result<EmbeddingDataset> {
    let mut out = train.clone();
    for (&client, indices) in &partition.assignments {
        let profile = profiles
            .iter()
            .find(|p| p.client_id == client)
            .ok_or_else(|| Error::param(format!("no noise profile for client {client}")))?;
        if profile.matrix.num_classes() != train.num_classes {
            return Err(Error::param(format!(
                "client {client} noise matrix has {} classes, dataset has {}",
                profile.matrix.num_classes(),
                train.num_classes
            )));
        }
        let truth: Vec<usize> = indices.iter().map(|&i| train.examples[i].true_label).collect();
        let noisy = apply_noise(&truth, &profile.matrix, seed::hash64(seed, &[client as u64]))?;
        for (&i, y) in indices.iter().zip(noisy) {
            out.examples[i].observed_label = y;
        }
    }
    Ok(out)
}
