//! Intravoxel incoherent motion (IVIM) parameter estimation.
//!
//! Two estimators of `{S0, f, D, D*}` from a diffusion-weighted trace signal:
//! segmented box-constrained least squares ([`lsq`]) and an amortized Gaussian
//! posterior network ([`agp`]) trained on the stochastic acquisition simulator
//! ([`simulate`]). A rejection sampler ([`abc`]) provides reference posteriors,
//! and [`eval`] reproduces the uncertainty, anisotropic-benchmark and
//! repeatability experiments.

pub mod abc;
pub mod agp;
pub mod eval;
pub mod lsq;
pub mod model;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod simulate;
pub mod tensor;
pub mod volume;

#[cfg(test)]
pub(crate) mod testutil;

pub use model::{signal_anisotropic, signal_isotropic};
pub use params::{sample_prior, IvimParams, ParamPrior, N_PARAMS, PARAM_NAMES};
pub use protocol::{default_protocol, AcquisitionProtocol, SignalVector};
pub use simulate::{sample_rician, sample_training_pair, simulate_signal, simulate_signal_anisotropic};
pub use tensor::{prolate_tensor_from_mean_adc_fa, DiffusionTensorPair, SymTensor};
