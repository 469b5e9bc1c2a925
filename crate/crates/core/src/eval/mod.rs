//! Uncertainty grids, the anisotropic MAE benchmark and test-retest repeatability.

mod benchmark;
mod grid;
mod repeat;

use thiserror::Error;

pub use benchmark::{anisotropic_benchmark, BenchmarkCase, BenchmarkConfig, BenchmarkReport, MethodMae};
pub use grid::{uncertainty_grid, UncertaintyGrid, UncertaintyGridSpec};
pub use repeat::{
    repeatability_var, roi_mean, synthetic_repeatability_study, RepeatConfig, RepeatabilityReport,
    SubjectRoiMeans,
};

use crate::agp::AgpError;
use crate::lsq::LsqError;
use crate::protocol::ProtocolError;
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("TEST + RETEST is zero for subject {subject}; VAR% undefined")]
    UndefinedPair { subject: usize },
    #[error("{what}: expected {expected} values, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("region of interest contains no valid voxels")]
    EmptyMask,
    #[error(transparent)]
    Agp(#[from] AgpError),
    #[error(transparent)]
    Lsq(#[from] LsqError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Rejects a model whose input width differs from the protocol's b-value count.
fn check_model(model: &crate::agp::MlpModel, protocol: &crate::protocol::AcquisitionProtocol) -> Result<(), EvalError> {
    if model.n_inputs() != protocol.n_b() {
        return Err(AgpError::DimensionMismatch {
            expected: model.n_inputs(),
            found: protocol.n_b(),
        }
        .into());
    }
    Ok(())
}
