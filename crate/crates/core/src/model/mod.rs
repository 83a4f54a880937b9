//! Feed-forward classifier `p(y | x)`: ReLU hidden layers, softmax output,
//! double precision throughout.

mod checkpoint;
mod knn;
mod loss;
mod train;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

pub use checkpoint::{checkpoint_from_json, checkpoint_to_json};
pub use knn::{knn_predict, neighbors, Metric, Prediction};
pub use loss::{cross_entropy, kd_loss, log_softmax_rows, softmax_rows, LOG_CLAMP};
pub use train::{loss_and_gradient, train_local, Gradients, LossMix, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// `weights[l]` is `out x in`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Logits and softmax probabilities, both `rows x classes` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub rows: usize,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Outputs {
    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Argmax per row, ties to the lower class.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .chunks(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (c, &p)| if p > row[best] { c } else { best })
            })
            .collect()
    }
}

/// He-normal weights (`sqrt(2 / fan_in)` scale) and zero biases.
pub fn init_weights(layer_sizes: &[usize], seed: u64) -> Result<Mlp> {
    check_sizes(layer_sizes)?;
    let mut rng = seed::rng(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        weights.push((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(Mlp {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
    })
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::param(format!(
            "an MLP needs input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::param(format!("zero-width layer in {layer_sizes:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Build from explicit parameters; shapes must agree with `layer_sizes`.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::param("parameter count does not match layer count"));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(Error::DimensionMismatch {
                    location: format!("layer {l}"),
                    expected: pair[0] * pair[1],
                    found: weights[l].len(),
                });
            }
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect();
        let biases = layer_sizes.windows(2).map(|p| vec![0.0; p[1]]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_parameters() {
            return Err(Error::DimensionMismatch {
                location: "flat parameter vector".into(),
                expected: self.num_parameters(),
                found: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut pos = 0;
        for (w, b) in out.weights.iter_mut().zip(out.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            b.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(out)
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&mut Vec<f64>, &mut Vec<f64>)> {
        self.weights.iter_mut().zip(self.biases.iter_mut())
    }

    /// Activations of every layer for a batch, input first. Hidden entries
    /// are post-ReLU; the last entry holds the logits.
    pub(crate) fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.input_dim();
        if x.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                location: "forward input".into(),
                expected: d,
                found: x.len() % d,
            });
        }
        let rows = x.len() / d;
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(x.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let input = acts.last().unwrap();
            let w = &self.weights[l];
            let b = &self.biases[l];
            let mut out = vec![0.0; rows * fan_out];
            for r in 0..rows {
                let a = &input[r * fan_in..(r + 1) * fan_in];
                for (o, z) in out[r * fan_out..(r + 1) * fan_out].iter_mut().enumerate() {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let mut s = b[o];
                    for (wi, ai) in row.iter().zip(a) {
                        s += wi * ai;
                    }
                    *z = if l < last { s.max(0.0) } else { s };
                }
            }
            acts.push(out);
        }
        Ok(acts)
    }

    /// Logits for a row-major batch.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(x)?.pop().unwrap())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Outputs> {
        let logits = self.logits(x)?;
        let classes = self.num_classes();
        let probs = softmax_rows(&logits, classes, 1.0);
        Ok(Outputs {
            rows: logits.len() / classes,
            classes,
            logits,
            probs,
        })
    }

    /// Fraction of rows whose argmax equals the label.
    pub fn accuracy(&self, x: &[f64], labels: &[usize]) -> Result<f64> {
        let out = self.forward(x)?;
        if out.rows != labels.len() {
            return Err(Error::DimensionMismatch {
                location: "accuracy labels".into(),
                expected: out.rows,
                found: labels.len(),
            });
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let hits = out
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = init_weights(&[4, 8, 3], 17).unwrap();
        let b = init_weights(&[4, 8, 3], 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights(&[4, 8, 3], 18).unwrap());
        assert!(a.biases.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn init_scale_matches_fan_in() {
        let m = init_weights(&[2, 5000], 3).unwrap();
        let w = m.weights(0);
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn bad_layer_sizes() {
        assert!(init_weights(&[], 0).is_err());
        assert!(init_weights(&[5], 0).is_err());
        assert!(init_weights(&[5, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Mlp::zeros(&[3, 4]).unwrap();
        let out = m.forward(&[1.0, -2.0, 0.5, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(out.rows, 2);
        assert!(out.probs.iter().all(|&p| p == 0.25));
    }

    #[test]
    fn forward_rows_are_distributions() {
        let m = init_weights(&[3, 16, 5], 1).unwrap();
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        let out = m.forward(&x).unwrap();
        for r in 0..out.rows {
            let s: f64 = out.prob_row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let m = init_weights(&[3, 4, 2], 5).unwrap();
        let flat = m.flatten();
        assert_eq!(flat.len(), m.num_parameters());
        assert_eq!(m.unflatten(&flat).unwrap(), m);
        assert!(m.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn from_parts_checks_shapes() {
        assert!(Mlp::from_parts(vec![2, 2], vec![vec![0.0; 4]], vec![vec![0.0; 2]]).is_ok());
        assert!(Mlp::from_parts(vec![2, 2], vec![vec![0.0; 3]], vec![vec![0.0; 2]]).is_err());
        assert!(Mlp::from_parts(vec![2, 2], vec![], vec![]).is_err());
    }
}
