//! Class-conditional label noise.
//!
//! A [`NoiseMatrix`] `Q` is column-stochastic: column `j` is the distribution
//! of observed labels for samples whose true class is `j`, so
//! `Q[i][j] = p(y = i | y* = j)`. Noise is data-independent: the flip of one
//! label depends only on its true class.
//!
//! Two statistics summarize a matrix:
//!
//! * the *noise level* `1 - trace(Q) / C`, the average probability that a
//!   label is corrupted;
//! * the *noise sparsity*, how concentrated the off-diagonal mass of each
//!   column is. Uniform confusion has sparsity 0; class flipping between
//!   fixed pairs has sparsity 1.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Entries below this are structural zeros when counting sparsity.
pub const ZERO_THRESHOLD: f64 = 1e-12;

/// Tolerance on column sums.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStructure {
    /// Off-diagonal mass spread over every other class.
    Uniform,
    /// Off-diagonal mass spread over a seeded random subset of classes.
    SparseRandom,
    /// Classes are confused only within symmetric pairs.
    ClassFlip,
}

impl NoiseStructure {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseStructure::Uniform => "uniform",
            NoiseStructure::SparseRandom => "sparse_random",
            NoiseStructure::ClassFlip => "class_flip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub num_classes: usize,
    pub noise_level: f64,
    pub noise_sparsity: f64,
    pub structure: NoiseStructure,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(
        num_classes: usize,
        noise_level: f64,
        noise_sparsity: f64,
        structure: NoiseStructure,
        seed: u64,
    ) -> Self {
        Self {
            num_classes,
            noise_level,
            noise_sparsity,
            structure,
            seed,
        }
    }

    pub fn uniform(num_classes: usize, noise_level: f64) -> Self {
        Self::new(num_classes, noise_level, 0.0, NoiseStructure::Uniform, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::param(format!(
                "noise_level must lie in [0, 1], got {}",
                self.noise_level
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_sparsity) {
            return Err(Error::param(format!(
                "noise_sparsity must lie in [0, 1], got {}",
                self.noise_sparsity
            )));
        }
        Ok(())
    }

    /// Sparsity after the structure override: uniform forces 0, class flip forces 1.
    pub fn effective_sparsity(&self) -> f64 {
        match self.structure {
            NoiseStructure::Uniform => 0.0,
            NoiseStructure::ClassFlip => 1.0,
            NoiseStructure::SparseRandom => self.noise_sparsity,
        }
    }

    /// Number of positive off-diagonal entries per noisy column.
    pub fn targets_per_column(&self) -> usize {
        let others = (self.num_classes - 1) as f64;
        let m = ((1.0 - self.effective_sparsity()) * others).round() as usize;
        m.clamp(1, self.num_classes - 1)
    }
}

/// Column-stochastic `C x C` matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMatrix {
    num_classes: usize,
    entries: Vec<f64>,
}

impl NoiseMatrix {
    /// Validates non-negativity and column sums.
    pub fn new(num_classes: usize, entries: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param("noise matrix needs at least 2 classes"));
        }
        if entries.len() != num_classes * num_classes {
            return Err(Error::param(format!(
                "expected {} entries for a {num_classes}x{num_classes} matrix, got {}",
                num_classes * num_classes,
                entries.len()
            )));
        }
        let q = Self {
            num_classes,
            entries,
        };
        for (idx, &v) in q.entries.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(format!(
                    "entry ({}, {}) = {v} is not a probability",
                    idx / num_classes,
                    idx % num_classes
                )));
            }
        }
        for j in 0..num_classes {
            let sum: f64 = (0..num_classes).map(|i| q.get(i, j)).sum();
            if (sum - 1.0).abs() > COLUMN_SUM_TOLERANCE {
                return Err(Error::param(format!("column {j} sums to {sum}, not 1")));
            }
        }
        Ok(q)
    }

    /// Build from rows: `rows[i][j] = p(y = i | y* = j)`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::param("noise matrix rows must all have length C"));
        }
        Self::new(c, rows.concat())
    }

    pub fn identity(num_classes: usize) -> Self {
        let mut entries = vec![0.0; num_classes * num_classes];
        for j in 0..num_classes {
            entries[j * num_classes + j] = 1.0;
        }
        Self {
            num_classes,
            entries,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `p(y = observed | y* = true_class)`.
    #[inline]
    pub fn get(&self, observed: usize, true_class: usize) -> f64 {
        self.entries[observed * self.num_classes + true_class]
    }

    pub fn column(&self, true_class: usize) -> Vec<f64> {
        (0..self.num_classes)
            .map(|i| self.get(i, true_class))
            .collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks(self.num_classes)
    }

    /// CSV with one matrix row per line, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Csv {
                    line: lineno as u64 + 1,
                    reason: e.to_string(),
                })?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientNoiseProfile {
    pub client_id: usize,
    pub matrix: NoiseMatrix,
}

/// Construct `Q` from a spec.
///
/// Every diagonal entry is `1 - n_l`. Each column's off-diagonal mass `n_l`
/// is split equally over `m = max(1, round((1 - n_s)(C - 1)))` target
/// classes. Class-flip matrices pair classes symmetrically; with odd `C` the
/// last class is left unpaired and keeps a clean column.
pub fn build_noise_matrix(spec: &NoiseSpec) -> Result<NoiseMatrix> {
    spec.validate()?;
    let c = spec.num_classes;
    let level = spec.noise_level;
    let mut q = NoiseMatrix::identity(c);
    if level == 0.0 {
        return Ok(q);
    }
    let mut rng = seed::rng(spec.seed);
    let set = |q: &mut NoiseMatrix, i: usize, j: usize, v: f64| q.entries[i * c + j] = v;

    match spec.structure {
        NoiseStructure::ClassFlip => {
            let paired = c - c % 2;
            let mut order: Vec<usize> = (0..paired).collect();
            order.shuffle(&mut rng);
            for pair in order.chunks_exact(2) {
                let (a, b) = (pair[0], pair[1]);
                set(&mut q, a, a, 1.0 - level);
                set(&mut q, b, b, 1.0 - level);
                set(&mut q, b, a, level);
                set(&mut q, a, b, level);
            }
        }
        NoiseStructure::Uniform | NoiseStructure::SparseRandom => {
            let m = spec.targets_per_column();
            let share = level / m as f64;
            for j in 0..c {
                set(&mut q, j, j, 1.0 - level);
                // Sample among the C - 1 other classes, then skip over j.
                for t in index::sample(&mut rng, c - 1, m).into_iter() {
                    let i = if t >= j { t + 1 } else { t };
                    set(&mut q, i, j, share);
                }
            }
        }
    }
    Ok(q)
}

/// Scalar noise level `1 - trace(Q) / C`.
pub fn measure_noise_level(q: &NoiseMatrix) -> f64 {
    let c = q.num_classes();
    let trace: f64 = (0..c).map(|j| q.get(j, j)).sum();
    1.0 - trace / c as f64
}

/// Per-class noise levels `1 - Q[j][j]`.
pub fn per_class_noise_level(q: &NoiseMatrix) -> Vec<f64> {
    (0..q.num_classes()).map(|j| 1.0 - q.get(j, j)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sparsity {
    /// Mean fraction of zero off-diagonal entries per noisy column.
    pub raw: f64,
    /// Inverse of the construction rule: `1 - m / (C - 1)`, where `m` is the
    /// mean positive off-diagonal count, saturating to 1 when every noisy
    /// column puts its mass on a single class.
    pub normalized: f64,
}

/// Noise sparsity. Columns without off-diagonal mass are skipped; if every
/// column is clean both values are 0.
pub fn measure_noise_sparsity(q: &NoiseMatrix) -> Sparsity {
    let c = q.num_classes();
    let others = (c - 1) as f64;
    let mut zero_fraction = 0.0;
    let mut positives = 0.0;
    let mut included = 0usize;
    let mut all_single = true;
    for j in 0..c {
        let off: Vec<f64> = (0..c).filter(|&i| i != j).map(|i| q.get(i, j)).collect();
        if off.iter().all(|&v| v < ZERO_THRESHOLD) {
            continue;
        }
        let zeros = off.iter().filter(|&&v| v < ZERO_THRESHOLD).count();
        let pos = off.len() - zeros;
        all_single &= pos == 1;
        zero_fraction += zeros as f64 / others;
        positives += pos as f64;
        included += 1;
    }
    if included == 0 {
        return Sparsity {
            raw: 0.0,
            normalized: 0.0,
        };
    }
    let n = included as f64;
    let normalized = if all_single {
        1.0
    } else {
        1.0 - (positives / n) / others
    };
    Sparsity {
        raw: zero_fraction / n,
        normalized,
    }
}

/// Draw an observed label for each true label from its column of `Q`.
pub fn apply_noise(true_labels: &[usize], q: &NoiseMatrix, seed: u64) -> Result<Vec<usize>> {
    let c = q.num_classes();
    let mut rng = seed::rng(seed);
    true_labels
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            if y >= c {
                return Err(Error::param(format!(
                    "label {y} at position {k} is out of range for {c} classes"
                )));
            }
            let u: f64 = rng.gen();
            Ok(sample_column(q, y, u))
        })
        .collect()
}

fn sample_column(q: &NoiseMatrix, true_class: usize, u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = true_class;
    for i in 0..q.num_classes() {
        let p = q.get(i, true_class);
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = i;
        if u < cumulative {
            return i;
        }
    }
    last_positive
}

/// Count-based estimate of `Q` from paired true and observed labels.
pub fn empirical_matrix(
    true_labels: &[usize],
    observed_labels: &[usize],
    num_classes: usize,
) -> Result<NoiseMatrix> {
    if true_labels.len() != observed_labels.len() {
        return Err(Error::param(format!(
            "label sequences differ in length: {} vs {}",
            true_labels.len(),
            observed_labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::param("num_classes must be >= 2"));
    }
    let mut counts = vec![0usize; num_classes * num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&t, &o) in true_labels.iter().zip(observed_labels) {
        if t >= num_classes || o >= num_classes {
            return Err(Error::param(format!(
                "label pair ({t}, {o}) out of range for {num_classes} classes"
            )));
        }
        counts[o * num_classes + t] += 1;
        totals[t] += 1;
    }
    if let Some(class) = totals.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass { class });
    }
    let entries = counts
        .iter()
        .enumerate()
        .map(|(idx, &n)| n as f64 / totals[idx % num_classes] as f64)
        .collect();
    NoiseMatrix::new(num_classes, entries)
}
