//! Deterministic federated-learning simulator for studying per-client label
//! noise.
//!
//! The crate models class-conditional label noise ([`noise`]), builds and
//! partitions embedding datasets ([`dataset`]), trains a small MLP
//! ([`model`]), estimates each client's noise level in one round
//! ([`estimation`]), and runs FedAvg with optional noise handling
//! ([`fed`]). [`harness`] wires it all to scenario files and the `fedln`
//! command line.
//!
//! Every random stream is seeded; identical inputs give bit-identical
//! outputs regardless of thread count.

pub mod dataset;
pub mod error;
pub mod estimation;
pub mod fed;
pub mod harness;
pub mod model;
pub mod noise;
pub mod seed;

pub use error::{Error, Result};

// Compile the guide's code listings as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/federated.md")]
    mod federated {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
