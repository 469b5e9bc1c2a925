//! Segmented two-stage least squares with box constraints.
//!
//! Stage 1 fits `log x = log A - b D` over the high-b points. Stage 2 holds D
//! fixed and fits `(S0, f, D*)` to all points with Levenberg–Marquardt in
//! logistic coordinates, so every iterate stays inside the box.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::params::{IvimParams, ParamPrior, D, D_STAR, F, N_PARAMS, PARAM_NAMES, PARAM_UNITS, S0};
use crate::protocol::{AcquisitionProtocol, ProtocolError, SignalVector};
use crate::volume::{Channel, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum LsqError {
    #[error("fit degenerate: {0}")]
    Degenerate(String),
    #[error("fit failed: all {0} starts produced non-finite objectives")]
    FitFailed(usize),
    #[error("invalid lsq configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("input volume: {0}")]
    Input(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Relative distance to a box edge below which an estimate counts as pinned.
pub const AT_BOUND_FRACTION: f64 = 1e-3;

/// Deterministic stage-2 starting points.
pub const START_F: [f64; 2] = [0.05, 0.3];
pub const START_D_STAR: [f64; 2] = [5e-3, 50e-3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsqConfig {
    /// Stage 1 uses b-values at or above this cutoff (s/mm²).
    pub segmentation_threshold: f64,
    pub bounds: ParamPrior,
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the objective by less than this fraction.
    pub convergence_tol: f64,
    /// Keep the stage-1 intercept as S0 instead of refitting it.
    pub fix_s0_from_stage1: bool,
}

impl Default for LsqConfig {
    fn default() -> Self {
        Self {
            segmentation_threshold: 250.0,
            bounds: ParamPrior::default(),
            max_iterations: 200,
            convergence_tol: 1e-10,
            fix_s0_from_stage1: false,
        }
    }
}

impl LsqConfig {
    pub fn validate(&self) -> Result<(), LsqError> {
        if self.max_iterations < 1 {
            return Err(LsqError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return Err(LsqError::InvalidConfig("convergence_tol must be > 0".into()));
        }
        if !(self.segmentation_threshold.is_finite() && self.segmentation_threshold > 0.0) {
            return Err(LsqError::InvalidConfig("segmentation_threshold must be > 0".into()));
        }
        Ok(())
    }

    /// The threshold must split the protocol's b-values.
    pub fn validate_for(&self, protocol: &AcquisitionProtocol) -> Result<(), LsqError> {
        self.validate()?;
        let b = protocol.b_values();
        let (lo, hi) = (b[0], b[b.len() - 1]);
        if !(self.segmentation_threshold > lo && self.segmentation_threshold < hi) {
            return Err(LsqError::InvalidConfig(format!(
                "segmentation_threshold {} not strictly inside protocol b-range [{lo}, {hi}]",
                self.segmentation_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Fit {
    pub d: f64,
    /// `A` in `log x = log A - b D`; approximates `S0 (1 - f)`.
    pub s0_intercept: f64,
    /// Coefficient of determination of the log-linear regression.
    pub r2: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqFitResult {
    pub params: IvimParams,
    /// `‖S(b; y) − x‖₂`.
    pub residual_norm: f64,
    /// Absent when stage 2 was run on its own.
    pub stage1_r2: Option<f64>,
    pub converged: bool,
    pub at_bound_mask: [bool; N_PARAMS],
    /// Objective after every accepted LM step of the winning start.
    pub objective_trace: Vec<f64>,
}

/// Log-linear mono-exponential fit over `b >= threshold`, skipping nonpositive samples.
pub fn fit_stage1_monoexp(
    signal: &SignalVector,
    protocol: &AcquisitionProtocol,
    config: &LsqConfig,
) -> Result<Stage1Fit, LsqError> {
    protocol.check_signal(signal)?;
    let mut n_high = 0usize;
    let pts: Vec<(f64, f64)> = protocol
        .b_values()
        .iter()
        .zip(signal.values())
        .filter(|(b, _)| **b >= config.segmentation_threshold)
        .inspect(|_| n_high += 1)
        .filter(|(_, x)| **x > 0.0)
        .map(|(b, x)| (*b, x.ln()))
        .collect();
    if n_high < 2 {
        return Err(LsqError::Degenerate(format!(
            "{n_high} b-values >= {}, need at least 2",
            config.segmentation_threshold
        )));
    }
    if pts.len() < 2 {
        return Err(LsqError::Degenerate(format!(
            "only {} positive high-b samples, need at least 2",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mb = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sbb = pts.iter().map(|p| (p.0 - mb).powi(2)).sum::<f64>();
    let sby = pts.iter().map(|p| (p.0 - mb) * (p.1 - my)).sum::<f64>();
    let slope = sby / sbb;
    let intercept = my - slope * mb;
    let ss_tot = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>();
    let ss_res = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let (lo, hi) = (config.bounds.lo()[D], config.bounds.hi()[D]);
    Ok(Stage1Fit {
        d: (-slope).clamp(lo, hi),
        s0_intercept: intercept.exp(),
        r2,
        n_points: pts.len(),
    })
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// One bounded coordinate `p = lo + (hi - lo) σ(u)`; fixed when `lo == hi`
/// or when pinned by the caller.
#[derive(Debug, Clone, Copy)]
struct BoxedCoord {
    lo: f64,
    hi: f64,
    fixed: Option<f64>,
}

impl BoxedCoord {
    fn value(&self, u: f64) -> f64 {
        match self.fixed {
            Some(v) => v,
            None => (self.lo + (self.hi - self.lo) * logistic(u)).clamp(self.lo, self.hi),
        }
    }

    fn deriv(&self, u: f64) -> f64 {
        match self.fixed {
            Some(_) => 0.0,
            None => {
                let s = logistic(u);
                (self.hi - self.lo) * s * (1.0 - s)
            }
        }
    }

    /// Inverse map for a start value, pulled 1% inside the box.
    fn coordinate(&self, p: f64) -> f64 {
        if self.fixed.is_some() {
            return 0.0;
        }
        let w = self.hi - self.lo;
        let t = ((p - self.lo) / w).clamp(0.01, 0.99);
        (t / (1.0 - t)).ln()
    }

    fn at_bound(&self, p: f64) -> bool {
        let w = self.hi - self.lo;
        if w <= 0.0 {
            return true;
        }
        (p - self.lo) <= AT_BOUND_FRACTION * w || (self.hi - p) <= AT_BOUND_FRACTION * w
    }
}

struct Stage2Problem<'a> {
    b: &'a [f64],
    x: &'a [f64],
    d: f64,
    coords: [BoxedCoord; 3],
}

#[derive(Debug, Clone)]
struct LmOutcome {
    p: [f64; 3],
    cost: f64,
    converged: bool,
    trace: Vec<f64>,
}

impl Stage2Problem<'_> {
    fn params(&self, u: &Vector3<f64>) -> [f64; 3] {
        [
            self.coords[0].value(u[0]),
            self.coords[1].value(u[1]),
            self.coords[2].value(u[2]),
        ]
    }

    fn cost(&self, p: &[f64; 3]) -> f64 {
        let [s0, f, ds] = *p;
        self.b
            .iter()
            .zip(self.x)
            .map(|(&b, &x)| {
                let r = s0 * (f * (-b * ds).exp() + (1.0 - f) * (-b * self.d).exp()) - x;
                r * r
            })
            .sum()
    }

    /// Normal equations `JᵀJ`, gradient `Jᵀr` in `u` coordinates, and the cost.
    fn linearize(&self, u: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>, f64) {
        let [s0, f, ds] = self.params(u);
        let dp = Vector3::new(
            self.coords[0].deriv(u[0]),
            self.coords[1].deriv(u[1]),
            self.coords[2].deriv(u[2]),
        );
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut cost = 0.0;
        for (&b, &x) in self.b.iter().zip(self.x) {
            let es = (-b * ds).exp();
            let ed = (-b * self.d).exp();
            let r = s0 * (f * es + (1.0 - f) * ed) - x;
            let j = Vector3::new(
                (f * es + (1.0 - f) * ed) * dp[0],
                s0 * (es - ed) * dp[1],
                -s0 * f * b * es * dp[2],
            );
            jtj += j * j.transpose();
            jtr += j * r;
            cost += r * r;
        }
        (jtj, jtr, cost)
    }

    fn minimize(&self, mut u: Vector3<f64>, max_iter: usize, tol: f64) -> LmOutcome {
        let scale = self.x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        let floor = (1e-15 * scale).powi(2) * self.x.len() as f64;
        let (mut jtj, mut jtr, mut cost) = self.linearize(&u);
        let mut trace = vec![cost];
        let mut mu = 1e-3;
        let mut converged = false;
        for _ in 0..max_iter {
            if !cost.is_finite() {
                break;
            }
            if cost <= floor {
                converged = true;
                break;
            }
            let diag_max = (0..3).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max);
            if diag_max == 0.0 || jtr.norm() <= 1e-300 {
                converged = true;
                break;
            }
            let mut a = jtj;
            let mut g = jtr;
            for i in 0..3 {
                if self.coords[i].fixed.is_some() {
                    a.row_mut(i).fill(0.0);
                    a.column_mut(i).fill(0.0);
                    a[(i, i)] = 1.0;
                    g[i] = 0.0;
                } else {
                    a[(i, i)] += mu * jtj[(i, i)].max(1e-12 * diag_max);
                }
            }
            let step = a.cholesky().map(|c| c.solve(&(-g)));
            let Some(delta) = step.filter(|d| d.iter().all(|v| v.is_finite())) else {
                mu *= 10.0;
                if mu > 1e20 {
                    converged = true;
                    break;
                }
                continue;
            };
            let u_new = u + delta;
            let new_cost = self.cost(&self.params(&u_new));
            let negligible = delta.norm() <= 1e-14 * (u.norm() + 1e-12);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                u = u_new;
                (jtj, jtr, cost) = self.linearize(&u);
                trace.push(cost);
                mu = (mu / 10.0).max(1e-15);
                if rel < tol || negligible {
                    converged = true;
                    break;
                }
            } else {
                mu *= 10.0;
                if mu > 1e20 || negligible {
                    // no descent direction left at working precision
                    converged = true;
                    break;
                }
            }
        }
        LmOutcome {
            p: self.params(&u),
            cost,
            converged,
            trace,
        }
    }
}

fn stage2(
    signal: &SignalVector,
    protocol: &AcquisitionProtocol,
    d_fixed: f64,
    s0_fixed: Option<f64>,
    config: &LsqConfig,
) -> Result<LsqFitResult, LsqError> {
    config.validate()?;
    protocol.check_signal(signal)?;
    let lo = config.bounds.lo();
    let hi = config.bounds.hi();
    if !(d_fixed >= lo[D] && d_fixed <= hi[D]) {
        return Err(LsqError::InvalidConfig(format!(
            "d_fixed {d_fixed} outside bounds [{}, {}]",
            lo[D], hi[D]
        )));
    }
    let ds_lo = lo[D_STAR].max(d_fixed);
    if ds_lo > hi[D_STAR] {
        return Err(LsqError::InvalidConfig(format!(
            "d_fixed {d_fixed} exceeds d_star upper bound {}",
            hi[D_STAR]
        )));
    }
    let coord = |l: f64, h: f64, fixed: Option<f64>| BoxedCoord {
        lo: l,
        hi: h,
        fixed: fixed.or(if l == h { Some(l) } else { None }),
    };
    let problem = Stage2Problem {
        b: protocol.b_values(),
        x: signal.values(),
        d: d_fixed,
        coords: [
            coord(lo[S0], hi[S0], s0_fixed.map(|s| s.clamp(lo[S0], hi[S0]))),
            coord(lo[F], hi[F], None),
            coord(ds_lo, hi[D_STAR], None),
        ],
    };
    let x = signal.values();
    let s0_start = match protocol.b0_index() {
        Some(i) => x[i],
        None => x.iter().cloned().fold(0.0, f64::max),
    };

    let mut best: Option<LmOutcome> = None;
    let mut n_starts = 0;
    for &f0 in &START_F {
        for &ds0 in &START_D_STAR {
            n_starts += 1;
            let u0 = Vector3::new(
                problem.coords[0].coordinate(s0_start),
                problem.coords[1].coordinate(f0),
                problem.coords[2].coordinate(ds0),
            );
            let out = problem.minimize(u0, config.max_iterations, config.convergence_tol);
            if !out.cost.is_finite() {
                continue;
            }
            best = Some(match best {
                None => out,
                Some(b) => {
                    let tie = (out.cost - b.cost).abs() <= 1e-12 * out.cost.max(b.cost);
                    if (tie && out.p[1] < b.p[1]) || (!tie && out.cost < b.cost) {
                        out
                    } else {
                        b
                    }
                }
            });
        }
    }
    let best = best.ok_or(LsqError::FitFailed(n_starts))?;
    let [s0, f, ds] = best.p;
    let params = IvimParams::new(s0, f, d_fixed, ds)
        .map_err(|e| LsqError::Degenerate(format!("stage-2 estimate invalid: {e}")))?;
    let d_coord = BoxedCoord {
        lo: lo[D],
        hi: hi[D],
        fixed: None,
    };
    Ok(LsqFitResult {
        params,
        residual_norm: best.cost.sqrt(),
        stage1_r2: None,
        converged: best.converged,
        at_bound_mask: [
            problem.coords[0].at_bound(s0),
            problem.coords[1].at_bound(f),
            d_coord.at_bound(d_fixed),
            problem.coords[2].at_bound(ds),
        ],
        objective_trace: best.trace,
    })
}

/// Fits `(S0, f, D*)` with `D` held at `d_fixed`, best of four deterministic starts.
pub fn fit_stage2_perfusion(
    signal: &SignalVector,
    protocol: &AcquisitionProtocol,
    d_fixed: f64,
    config: &LsqConfig,
) -> Result<LsqFitResult, LsqError> {
    stage2(signal, protocol, d_fixed, None, config)
}

/// Stage 1 then stage 2.
pub fn fit_lsq(
    signal: &SignalVector,
    protocol: &AcquisitionProtocol,
    config: &LsqConfig,
) -> Result<LsqFitResult, LsqError> {
    let s1 = fit_stage1_monoexp(signal, protocol, config)?;
    config.validate_for(protocol)?;
    let s0_fixed = config.fix_s0_from_stage1.then_some(s1.s0_intercept);
    let mut res = stage2(signal, protocol, s1.d, s0_fixed, config)?;
    res.stage1_r2 = Some(s1.r2);
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelStatus {
    Ok = 0,
    Degenerate = 1,
    Failed = 2,
    InvalidInput = 3,
}

/// Per-voxel LSQ maps. Voxels that could not be fitted hold NaN parameters.
#[derive(Debug, Clone)]
pub struct LsqMaps {
    /// Channels `s0, f, d, d_star`.
    pub params: Volume,
    /// Channels `residual_norm, stage1_r2, converged, status`.
    pub quality: Volume,
    /// One 0/1 channel per parameter.
    pub at_bound: Volume,
    pub status: Vec<VoxelStatus>,
}

pub fn param_channels(suffix: &str) -> Vec<Channel> {
    PARAM_NAMES
        .iter()
        .zip(PARAM_UNITS)
        .map(|(n, u)| Channel::new(format!("{n}{suffix}"), u))
        .collect()
}

pub fn fit_volume_lsq(
    volume: &Volume,
    protocol: &AcquisitionProtocol,
    config: &LsqConfig,
) -> Result<LsqMaps, LsqError> {
    if volume.n_channels() != protocol.n_b() {
        return Err(LsqError::Input(format!(
            "volume has {} channels, protocol expects {} b-values",
            volume.n_channels(),
            protocol.n_b()
        )));
    }
    config.validate()?;
    let fits: Vec<Result<LsqFitResult, VoxelStatus>> = (0..volume.n_voxels())
        .into_par_iter()
        .map(|v| {
            let sig = SignalVector::new(volume.voxel(v).iter().map(|&s| s as f64).collect())
                .map_err(|_| VoxelStatus::InvalidInput)?;
            fit_lsq(&sig, protocol, config).map_err(|e| match e {
                LsqError::Degenerate(_) => VoxelStatus::Degenerate,
                _ => VoxelStatus::Failed,
            })
        })
        .collect();

    let dims = volume.dims();
    let mut params = Volume::filled(dims, "params", param_channels(""), f32::NAN)?;
    let mut quality = Volume::filled(
        dims,
        "fit_quality",
        vec![
            Channel::new("residual_norm", "a.u."),
            Channel::new("stage1_r2", "1"),
            Channel::new("converged", "bool"),
            Channel::new("status", "code"),
        ],
        f32::NAN,
    )?;
    let mut at_bound = Volume::filled(dims, "at_bound", param_channels("_at_bound"), 0.0)?;
    let mut status = Vec::with_capacity(fits.len());
    for (v, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(r) => {
                for (dst, src) in params.voxel_mut(v).iter_mut().zip(r.params.to_array()) {
                    *dst = src as f32;
                }
                quality.voxel_mut(v).copy_from_slice(&[
                    r.residual_norm as f32,
                    r.stage1_r2.unwrap_or(f64::NAN) as f32,
                    if r.converged { 1.0 } else { 0.0 },
                    VoxelStatus::Ok as i32 as f32,
                ]);
                for (dst, flag) in at_bound.voxel_mut(v).iter_mut().zip(r.at_bound_mask) {
                    *dst = if flag { 1.0 } else { 0.0 };
                }
                status.push(VoxelStatus::Ok);
            }
            Err(s) => {
                quality.voxel_mut(v)[3] = s as i32 as f32;
                status.push(s);
            }
        }
    }
    Ok(LsqMaps {
        params,
        quality,
        at_bound,
        status,
    })
}
