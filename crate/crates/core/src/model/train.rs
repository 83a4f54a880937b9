//! Mini-batch SGD on the mixed objective
//! `(1 - beta) * CE(observed labels) + beta * T^2 * KL(teacher_T || student_T)`
//! plus an L2 penalty `weight_decay / 2 * |W|^2` on weight matrices.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, kd_loss, softmax_rows};
use super::Mlp;
use crate::dataset::DataView;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            local_epochs: 1,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::param("local_epochs must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// How much of the local loss comes from distilling a teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMix {
    pub beta: f64,
    pub temperature: f64,
    pub teacher: Option<Mlp>,
}

impl LossMix {
    /// Pure cross-entropy.
    pub fn cross_entropy() -> Self {
        Self {
            beta: 0.0,
            temperature: 1.0,
            teacher: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::param(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("temperature must be positive"));
        }
        if self.beta > 0.0 && self.teacher.is_none() {
            return Err(Error::param("beta > 0 requires a teacher model"));
        }
        Ok(())
    }

    fn teacher_probs(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        match (&self.teacher, self.beta > 0.0) {
            (Some(t), true) => Ok(Some(softmax_rows(&t.logits(x)?, t.num_classes(), self.temperature))),
            _ => Ok(None),
        }
    }
}

/// Gradients shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`Mlp::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Objective value (including the L2 term) and its gradient for one batch.
pub fn loss_and_gradient(
    model: &Mlp,
    x: &[f64],
    labels: &[usize],
    mix: &LossMix,
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    let teacher = mix.teacher_probs(x)?;
    let (data_loss, grads) = batch_gradient(model, x, labels, mix, teacher.as_deref(), weight_decay)?;
    let penalty: f64 = model
        .weights
        .iter()
        .flatten()
        .map(|w| w * w)
        .sum::<f64>()
        * weight_decay
        / 2.0;
    Ok((data_loss + penalty, grads))
}

fn batch_gradient(
    model: &Mlp,
    x: &[f64],
    labels: &[usize],
    mix: &LossMix,
    teacher: Option<&[f64]>,
    weight_decay: f64,
) -> Result<(f64, Gradients)> {
    let classes = model.num_classes();
    let acts = model.activations(x)?;
    let rows = labels.len();
    let logits = acts.last().unwrap();
    if logits.len() != rows * classes {
        return Err(Error::DimensionMismatch {
            location: "batch labels".into(),
            expected: logits.len() / classes,
            found: rows,
        });
    }
    let n = rows as f64;
    let ce_weight = 1.0 - mix.beta;

    // dLoss / dlogits
    let mut delta = vec![0.0; rows * classes];
    let mut loss = 0.0;
    if ce_weight > 0.0 {
        let probs = softmax_rows(logits, classes, 1.0);
        loss += ce_weight * cross_entropy(&probs, classes, labels)?;
        for (r, &y) in labels.iter().enumerate() {
            for c in 0..classes {
                let target = if c == y { 1.0 } else { 0.0 };
                delta[r * classes + c] = ce_weight * (probs[r * classes + c] - target) / n;
            }
        }
    }
    if let Some(teacher) = teacher {
        let t = mix.temperature;
        loss += mix.beta * kd_loss(logits, teacher, classes, t)?;
        let soft = softmax_rows(logits, classes, t);
        for ((d, s), p) in delta.iter_mut().zip(&soft).zip(teacher) {
            *d += mix.beta * t * (s - p) / n;
        }
    }

    let layers = model.num_layers();
    let mut gw: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = model.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    for l in (0..layers).rev() {
        let (fan_in, fan_out) = (model.layer_sizes[l], model.layer_sizes[l + 1]);
        let input = &acts[l];
        for r in 0..rows {
            let a = &input[r * fan_in..(r + 1) * fan_in];
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[l][o] += dv;
                for (g, &ai) in gw[l][o * fan_in..(o + 1) * fan_in].iter_mut().zip(a) {
                    *g += dv * ai;
                }
            }
        }
        if l > 0 {
            let w = &model.weights[l];
            let mut prev = vec![0.0; rows * fan_in];
            for r in 0..rows {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let p = &mut prev[r * fan_in..(r + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (pi, &wi) in p.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *pi += dv * wi;
                    }
                }
                // ReLU gate on the hidden activations feeding this layer.
                for (pi, &ai) in p.iter_mut().zip(&input[r * fan_in..(r + 1) * fan_in]) {
                    if ai <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    if weight_decay > 0.0 {
        for (g, w) in gw.iter_mut().zip(&model.weights) {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += weight_decay * wi;
            }
        }
    }
    Ok((
        loss,
        Gradients {
            weights: gw,
            biases: gb,
        },
    ))
}

/// Local SGD. Returns the trained model and the mean data loss of every
/// epoch, measured on each batch before its update.
pub fn train_local(
    model: &Mlp,
    data: &DataView,
    config: &TrainConfig,
    mix: &LossMix,
) -> Result<(Mlp, Vec<f64>)> {
    config.validate()?;
    mix.validate()?;
    if data.is_empty() {
        return Err(Error::param("cannot train on an empty data view"));
    }
    if data.dim != model.input_dim() {
        return Err(Error::DimensionMismatch {
            location: "training features".into(),
            expected: model.input_dim(),
            found: data.dim,
        });
    }
    if let Some(t) = &mix.teacher {
        if t.input_dim() != model.input_dim() || t.num_classes() != model.num_classes() {
            return Err(Error::param("teacher and student disagree on input or class count"));
        }
    }

    let mut model = model.clone();
    let mut rng = seed::rng(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.local_epochs);
    let lr = config.learning_rate;
    let mut x = Vec::with_capacity(config.batch_size * data.dim);
    let mut y = Vec::with_capacity(config.batch_size);

    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            x.clear();
            y.clear();
            for &i in batch {
                x.extend_from_slice(data.row(i));
                y.push(data.labels[i]);
            }
            let teacher = mix.teacher_probs(&x)?;
            let (loss, grads) =
                batch_gradient(&model, &x, &y, mix, teacher.as_deref(), config.weight_decay)?;
            total += loss * batch.len() as f64;
            for ((w, b), (gw, gb)) in model.params_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                for (wi, gi) in w.iter_mut().zip(gw) {
                    *wi -= lr * gi;
                }
                for (bi, gi) in b.iter_mut().zip(gb) {
                    *bi -= lr * gi;
                }
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok((model, epoch_losses))
}
