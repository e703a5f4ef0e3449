use bdlab_tensor::TensorError;
use serde::Serialize;
use thiserror::Error;

use crate::autoencoder::AeHistory;
use crate::backdoor::BackdoorError;
use crate::data::DataError;
use crate::gan::GanHistory;

/// Whatever a training loop had recorded before it stopped.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum PartialHistory {
    Autoencoder(AeHistory),
    Gan(GanHistory),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),

    #[error("non-finite {what} at epoch {epoch}, iteration {iteration}")]
    NonFinite {
        epoch: usize,
        iteration: usize,
        what: String,
        history: Box<PartialHistory>,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Backdoor(#[from] BackdoorError),

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    pub fn is_numerics(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Tensor(TensorError::NonFinite { .. })
        )
    }
}
