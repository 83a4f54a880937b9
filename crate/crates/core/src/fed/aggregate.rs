//! Server-side aggregation.
//!
//! Both rules are a normalized weighted mean of client parameters; they
//! differ only in the raw weight of each client:
//!
//! * FedAvg: `N_m`
//! * noise-aware: `N_m * (1 - n_hat_m)`
//!
//! Aggregation sees parameters, sample counts and `n_hat`, never data.

use crate::error::{Error, Result};
use crate::model::Mlp;

/// What a client hands back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub model: Mlp,
    pub sample_count: usize,
    pub n_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: Mlp,
    /// Normalized weights, aligned with the input updates.
    pub weights: Vec<f64>,
    /// Set when the noise-aware rule had no usable mass and fell back to FedAvg.
    pub fallback: bool,
}

/// Raw weights below this total trigger the FedAvg fallback.
pub const MIN_WEIGHT_MASS: f64 = 1e-12;

fn check(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| Error::param("cannot aggregate an empty cohort"))?;
    for u in updates {
        if !u.model.same_shape(&first.model) {
            return Err(Error::param(format!(
                "client {} model shape {:?} differs from {:?}",
                u.client_id,
                u.model.layer_sizes(),
                first.model.layer_sizes()
            )));
        }
    }
    Ok(())
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

/// Weighted parameter mean. The first term seeds the accumulator, so a
/// single update with weight 1 is returned bit for bit.
fn weighted_mean(updates: &[ClientUpdate], weights: &[f64]) -> Result<Mlp> {
    let mut acc: Vec<f64> = updates[0].model.flatten();
    acc.iter_mut().for_each(|v| *v *= weights[0]);
    for (u, &w) in updates.iter().zip(weights).skip(1) {
        for (a, p) in acc.iter_mut().zip(u.model.flatten()) {
            *a += w * p;
        }
    }
    updates[0].model.unflatten(&acc)
}

pub fn fedavg_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let raw: Vec<f64> = updates.iter().map(|u| u.sample_count as f64).collect();
    normalize(&raw)
}

pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Aggregate> {
    check(updates)?;
    if updates.iter().all(|u| u.sample_count == 0) {
        return Err(Error::param("every client in the cohort reported zero samples"));
    }
    let weights = fedavg_weights(updates);
    Ok(Aggregate {
        model: weighted_mean(updates, &weights)?,
        weights,
        fallback: false,
    })
}

/// Raw noise-aware weight of one client. Isolated so the rule can be swapped.
pub fn noise_aware_weight(sample_count: usize, n_hat: f64) -> f64 {
    sample_count as f64 * (1.0 - n_hat)
}

pub fn na_fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Aggregate> {
    check(updates)?;
    let raw = updates
        .iter()
        .map(|u| {
            let n_hat = u.n_hat.ok_or_else(|| {
                Error::param(format!("client {} has no noise estimate", u.client_id))
            })?;
            Ok(noise_aware_weight(u.sample_count, n_hat))
        })
        .collect::<Result<Vec<f64>>>()?;
    if raw.iter().sum::<f64>() < MIN_WEIGHT_MASS {
        let mut agg = fedavg_aggregate(updates)?;
        agg.fallback = true;
        return Ok(agg);
    }
    let weights = normalize(&raw);
    Ok(Aggregate {
        model: weighted_mean(updates, &weights)?,
        weights,
        fallback: false,
    })
}
