//! Probe-gated secure aggregation for federated LoRA fine-tuning.
//!
//! A linear probe scores per-step LoRA `B`-matrix deltas; three defense
//! levels turn the scores into per-client security factors that weight (or
//! veto) server aggregation. Classic robust aggregators are included for
//! comparison, together with a deterministic desk-scale simulator.
//!
//! The crate is `no_std` and needs only `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod defense;
mod error;
pub mod lora;
pub mod probe;
pub mod simulator;
pub mod substrate;

pub use error::{Error, Result};
