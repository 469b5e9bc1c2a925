use rayon::prelude::*;

use super::mlp::MlpModel;
use super::{AgpError, GaussianPosterior};
use crate::lsq::param_channels;
use crate::protocol::AcquisitionProtocol;
use crate::volume::Volume;

const CHUNK: usize = 256;

/// Posterior mean and standard deviation maps, 4 channels each.
#[derive(Debug, Clone)]
pub struct AgpMaps {
    pub mean: Volume,
    pub std: Volume,
}

/// Per-voxel posterior. Voxels with negative or non-finite samples get NaN maps.
pub fn fit_volume_agp(
    model: &MlpModel,
    volume: &Volume,
    protocol: &AcquisitionProtocol,
) -> Result<AgpMaps, AgpError> {
    if protocol.n_b() != model.n_inputs() {
        return Err(AgpError::DimensionMismatch {
            expected: model.n_inputs(),
            found: protocol.n_b(),
        });
    }
    if volume.n_channels() != model.n_inputs() {
        return Err(AgpError::DimensionMismatch {
            expected: model.n_inputs(),
            found: volume.n_channels(),
        });
    }
    let n = volume.n_voxels();
    let posts: Vec<Option<GaussianPosterior>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .flat_map_iter(|idx| {
            let signals: Vec<Option<Vec<f64>>> = idx
                .iter()
                .map(|&v| {
                    let s: Vec<f64> = volume.voxel(v).iter().map(|&x| x as f64).collect();
                    s.iter().all(|x| x.is_finite() && *x >= 0.0).then_some(s)
                })
                .collect();
            let valid: Vec<&[f64]> = signals.iter().flatten().map(|s| s.as_slice()).collect();
            let mut out = model
                .forward_batch(&valid)
                .expect("width checked above")
                .into_iter();
            signals
                .iter()
                .map(|s| s.as_ref().map(|_| out.next().unwrap()))
                .collect::<Vec<_>>()
        })
        .collect();

    let dims = volume.dims();
    let mut mean = Volume::filled(dims, "params", param_channels(""), f32::NAN)?;
    let mut std = Volume::filled(dims, "uncertainty", param_channels("_std"), f32::NAN)?;
    for (v, p) in posts.iter().enumerate() {
        if let Some(p) = p {
            for j in 0..4 {
                mean.voxel_mut(v)[j] = p.mean[j] as f32;
                std.voxel_mut(v)[j] = p.std[j] as f32;
            }
        }
    }
    if let Some(b) = volume.meta().get("b_values") {
        mean.set_meta("b_values", b.clone())?;
        std.set_meta("b_values", b.clone())?;
    }
    Ok(AgpMaps { mean, std })
}
