//! Backdoor attacks against autoencoders and GANs: data loading, triggers and
//! targets, training, metrics and experiment orchestration.

pub mod autoencoder;
pub mod backdoor;
pub mod data;
pub mod error;
pub mod gan;
pub mod harness;
pub mod metrics;

pub use error::{PartialHistory, TrainError};
