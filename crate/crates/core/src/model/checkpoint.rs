//! JSON checkpoints with base64 little-endian f64 payloads.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::Mlp;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    layer_sizes: Vec<usize>,
    layers: Vec<LayerPayload>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerPayload {
    weights: String,
    biases: String,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::param(format!("{what}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::param(format!("{what}: payload is not a whole number of f64s")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn checkpoint_to_json(model: &Mlp) -> String {
    let ckpt = Checkpoint {
        layer_sizes: model.layer_sizes().to_vec(),
        layers: (0..model.num_layers())
            .map(|l| LayerPayload {
                weights: encode(model.weights(l)),
                biases: encode(model.biases(l)),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes")
}

pub fn checkpoint_from_json(text: &str) -> Result<Mlp> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (l, layer) in ckpt.layers.iter().enumerate() {
        weights.push(decode(&layer.weights, &format!("layer {l} weights"))?);
        biases.push(decode(&layer.biases, &format!("layer {l} biases"))?);
    }
    Mlp::from_parts(ckpt.layer_sizes, weights, biases)
}
