use rayon::prelude::*;

use super::{check_model, EvalError};
use crate::agp::MlpModel;
use crate::lsq::param_channels;
use crate::params::{IvimParams, ParamPrior, D, D_STAR, F, N_PARAMS, PARAM_NAMES};
use crate::protocol::AcquisitionProtocol;
use crate::rng::{Domain, SeedStream};
use crate::simulate::simulate_signal;
use crate::volume::Volume;

/// One of `f, D, D*` held fixed while the other two sweep a regular grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyGridSpec {
    /// Parameter index (`F`, `D` or `D_STAR`).
    pub fixed_param: usize,
    pub fixed_value: f64,
    /// `(parameter index, lo, hi)` for the x and y axes.
    pub axes: [(usize, f64, f64); 2],
    pub resolution: [usize; 2],
    pub realizations: usize,
    pub s0: f64,
    pub with_dephasing: bool,
}

impl UncertaintyGridSpec {
    fn with_fixed(prior: &ParamPrior, fixed_param: usize, fixed_value: f64, resolution: usize) -> Self {
        let (lo, hi) = (prior.lo(), prior.hi());
        let free: Vec<usize> = [F, D, D_STAR].into_iter().filter(|&j| j != fixed_param).collect();
        Self {
            fixed_param,
            fixed_value,
            axes: [
                (free[0], lo[free[0]], hi[free[0]]),
                (free[1], lo[free[1]], hi[free[1]]),
            ],
            resolution: [resolution; 2],
            realizations: 100,
            s0: 1000.0,
            with_dephasing: true,
        }
    }

    /// `D* = 0.02`, sweeping `f` and `D`.
    pub fn fixed_d_star(prior: &ParamPrior, resolution: usize) -> Self {
        Self::with_fixed(prior, D_STAR, 0.02, resolution)
    }

    /// `D = 0.001`, sweeping `f` and `D*`.
    pub fn fixed_d(prior: &ParamPrior, resolution: usize) -> Self {
        Self::with_fixed(prior, D, 0.001, resolution)
    }

    /// `f = 0.2`, sweeping `D` and `D*`.
    pub fn fixed_f(prior: &ParamPrior, resolution: usize) -> Self {
        Self::with_fixed(prior, F, 0.2, resolution)
    }

    pub fn validate(&self, prior: &ParamPrior) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidSpec(m));
        let mut seen = [false; N_PARAMS];
        for j in [self.fixed_param, self.axes[0].0, self.axes[1].0] {
            if !matches!(j, F | D | D_STAR) || seen[j] {
                return bad("fixed and swept parameters must be three distinct members of f, d, d_star".into());
            }
            seen[j] = true;
        }
        let within = |j: usize, v: f64| v >= prior.lo()[j] && v <= prior.hi()[j];
        if !within(self.fixed_param, self.fixed_value) {
            return bad(format!("fixed {} = {} outside prior", PARAM_NAMES[self.fixed_param], self.fixed_value));
        }
        for &(j, lo, hi) in &self.axes {
            if !(within(j, lo) && within(j, hi) && lo < hi) {
                return bad(format!("{} range [{lo}, {hi}] not an increasing range within prior", PARAM_NAMES[j]));
            }
        }
        if self.resolution.iter().any(|&r| r < 2) {
            return bad("resolution must be >= 2 per axis".into());
        }
        if self.realizations < 1 {
            return bad("realizations must be >= 1".into());
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return bad("s0 must be positive".into());
        }
        Ok(())
    }

    pub fn axis_values(&self, axis: usize) -> Vec<f64> {
        let (_, lo, hi) = self.axes[axis];
        let n = self.resolution[axis];
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    /// Parameters of cell `(ix, iy)`, or `None` when `D > D*`.
    pub fn cell_params(&self, ix: usize, iy: usize) -> Option<IvimParams> {
        let mut v = [self.s0, 0.0, 0.0, 0.0];
        v[self.fixed_param] = self.fixed_value;
        let (jx, lo_x, hi_x) = self.axes[0];
        let (jy, lo_y, hi_y) = self.axes[1];
        v[jx] = lo_x + (hi_x - lo_x) * ix as f64 / (self.resolution[0] - 1) as f64;
        v[jy] = lo_y + (hi_y - lo_y) * iy as f64 / (self.resolution[1] - 1) as f64;
        IvimParams::from_array(v).ok()
    }
}

/// Mean predicted posterior std per cell; masked cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyGrid {
    pub spec: UncertaintyGridSpec,
    /// Indexed `ix + nx * iy`.
    pub mean_std: Vec<[f64; N_PARAMS]>,
}

impl UncertaintyGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> [f64; N_PARAMS] {
        self.mean_std[ix + self.spec.resolution[0] * iy]
    }

    /// `nx × ny × 1` volume with one channel per parameter's std.
    pub fn to_volume(&self) -> Result<Volume, EvalError> {
        let [nx, ny] = self.spec.resolution;
        let mut v = Volume::filled([nx, ny, 1], "uncertainty_grid", param_channels("_std"), f32::NAN)?;
        for (i, cell) in self.mean_std.iter().enumerate() {
            for (dst, s) in v.voxel_mut(i).iter_mut().zip(cell) {
                *dst = *s as f32;
            }
        }
        let s = &self.spec;
        v.set_meta("fixed", format!("{}={:e}", PARAM_NAMES[s.fixed_param], s.fixed_value))?;
        for (k, &(j, lo, hi)) in s.axes.iter().enumerate() {
            v.set_meta(&format!("axis{k}"), format!("{}:{lo:e}:{hi:e}", PARAM_NAMES[j]))?;
        }
        v.set_meta("realizations", s.realizations.to_string())?;
        v.set_meta("s0", format!("{:e}", s.s0))?;
        Ok(v)
    }
}

/// Cell `c`, realization `r` uses stream `(c << 32) | r` of `(seed, Grid)`.
pub fn uncertainty_grid(
    model: &MlpModel,
    spec: &UncertaintyGridSpec,
    prior: &ParamPrior,
    protocol: &AcquisitionProtocol,
    seed: u64,
) -> Result<UncertaintyGrid, EvalError> {
    spec.validate(prior)?;
    check_model(model, protocol)?;
    let [nx, ny] = spec.resolution;
    let stream = SeedStream::new(seed, Domain::Grid);
    let mean_std = (0..nx * ny)
        .into_par_iter()
        .map(|c| {
            let Some(p) = spec.cell_params(c % nx, c / nx) else {
                return [f64::NAN; N_PARAMS];
            };
            let signals: Vec<Vec<f64>> = (0..spec.realizations as u64)
                .map(|r| {
                    let mut rng = stream.rng(((c as u64) << 32) | r);
                    simulate_signal(&p, protocol, spec.with_dephasing, &mut rng).into_inner()
                })
                .collect();
            let refs: Vec<&[f64]> = signals.iter().map(Vec::as_slice).collect();
            let posts = model.forward_batch(&refs).expect("width checked");
            let mut acc = [0.0; N_PARAMS];
            for p in &posts {
                for j in 0..N_PARAMS {
                    acc[j] += p.std[j];
                }
            }
            acc.map(|a| a / posts.len() as f64)
        })
        .collect();
    Ok(UncertaintyGrid { spec: *spec, mean_std })
}
