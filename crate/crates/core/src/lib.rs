//! Noisy-label training with divergence-based uniform clean-sample selection,
//! twin networks, semi-supervised MixMatch training and a contrastive loss.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod metrics;
pub mod model;
pub mod ndkernel;
pub mod rng;
pub mod selection;
pub mod ssl;
