//! Amortized Gaussian posterior: an MLP mapping a trace signal to a diagonal
//! Gaussian over `{S0, f, D, D*}`, trained on simulator draws by minimizing the
//! Gaussian negative log-likelihood.

mod infer;
mod io;
mod loss;
mod mlp;
mod train;

use thiserror::Error;

pub use infer::{fit_volume_agp, AgpMaps};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, ModelFileError};
pub use loss::{gaussian_nll_loss, GaussianNll, LOG_STD_CLAMP};
pub use mlp::{
    Gradients, InputNorm, MlpModel, OutputNorm, HIDDEN_LAYERS, HIDDEN_WIDTH, OUTPUT_WIDTH,
};
pub use train::{
    loss_log_csv, train, Checkpoint, CheckpointError, TrainConfig, TrainOutcome, Trainer,
};

use crate::params::N_PARAMS;
use crate::protocol::ProtocolError;

#[derive(Debug, Error)]
pub enum AgpError {
    #[error("signal has {found} values, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite training loss at iteration {iteration} (seed {seed}, batch streams {first_stream:#x}..)")]
    NonFiniteLoss {
        iteration: u64,
        seed: u64,
        first_stream: u64,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error("batch is empty")]
    EmptyBatch,
}

/// Predicted posterior for one signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPosterior {
    /// Posterior mean in physical units.
    pub mean: [f64; N_PARAMS],
    /// Posterior standard deviation in physical units.
    pub std: [f64; N_PARAMS],
    /// Mean in normalized (prior-range) coordinates.
    pub mean_normalized: [f64; N_PARAMS],
    /// Clamped log standard deviation in normalized coordinates.
    pub log_std_normalized: [f64; N_PARAMS],
}

impl GaussianPosterior {
    /// `log(std)` in physical units.
    pub fn log_std(&self) -> [f64; N_PARAMS] {
        self.std.map(f64::ln)
    }
}
