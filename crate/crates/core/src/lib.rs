//! Deterministic federated-learning simulator built around a meta-aggregator
//! that weights client updates on the probability simplex from their
//! validation losses and meta-features, with a sample-share (FedAvg)
//! baseline for comparison.

pub mod aggregator;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod metafeatures;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
