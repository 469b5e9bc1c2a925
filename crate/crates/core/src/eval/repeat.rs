use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use super::{check_model, EvalError};
use crate::agp::MlpModel;
use crate::lsq::{fit_lsq, LsqConfig};
use crate::params::{IvimParams, D, D_STAR, F, N_PARAMS};
use crate::protocol::AcquisitionProtocol;
use crate::rng::{Domain, SeedStream};
use crate::simulate::simulate_signal;

/// `(100/N) Σ |T_i − R_i| / (|T_i + R_i| / 2)`.
pub fn repeatability_var(test: &[f64], retest: &[f64]) -> Result<f64, EvalError> {
    if test.len() != retest.len() {
        return Err(EvalError::LengthMismatch {
            what: "retest",
            expected: test.len(),
            found: retest.len(),
        });
    }
    if test.is_empty() {
        return Err(EvalError::InvalidSpec("repeatability needs at least one subject".into()));
    }
    let mut acc = 0.0;
    for (subject, (t, r)) in test.iter().zip(retest).enumerate() {
        let s = (t + r).abs();
        if s == 0.0 {
            return Err(EvalError::UndefinedPair { subject });
        }
        acc += (t - r).abs() / (s / 2.0);
    }
    Ok(100.0 * acc / test.len() as f64)
}

/// Mean over voxels with `mask` set and a finite value.
pub fn roi_mean(map: &[f64], mask: &[bool]) -> Result<f64, EvalError> {
    if map.len() != mask.len() {
        return Err(EvalError::LengthMismatch {
            what: "mask",
            expected: map.len(),
            found: mask.len(),
        });
    }
    let (sum, n) = map
        .iter()
        .zip(mask)
        .filter(|(v, &m)| m && v.is_finite())
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatConfig {
    pub n_subjects: usize,
    /// ROI size in voxels (x, y).
    pub roi: [usize; 2],
    /// Typical `[S0, f, D, D*]` around which each subject's field varies.
    pub base: [f64; N_PARAMS],
    /// Maximum relative deviation of the field from `base`.
    pub perturbation: f64,
    pub noise_scale: f64,
    pub with_dephasing: bool,
    pub seed: u64,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        Self {
            n_subjects: 17,
            roi: [8, 8],
            base: [1000.0, 0.3, 1.5e-3, 3e-2],
            perturbation: 0.1,
            noise_scale: 1.0,
            with_dephasing: true,
            seed: 0,
        }
    }
}

/// ROI means `[S0, f, D, D*]` of one subject's two sessions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectRoiMeans {
    pub truth: [f64; N_PARAMS],
    pub agp: [[f64; N_PARAMS]; 2],
    pub lsq: [[f64; N_PARAMS]; 2],
}

/// VAR% and mean for `f, D, D*`, one row per method.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatabilityReport {
    pub config: RepeatConfig,
    pub protocol_fingerprint: u32,
    pub agp_var: [f64; 3],
    pub lsq_var: [f64; 3],
    pub agp_mean: [f64; 3],
    pub lsq_mean: [f64; 3],
    pub subjects: Vec<SubjectRoiMeans>,
}

const REPORTED: [usize; 3] = [F, D, D_STAR];

impl RepeatabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,var_f,var_d,var_d_star,mean_f,mean_d,mean_d_star\n");
        for (name, var, mean) in [("agp", self.agp_var, self.agp_mean), ("lsq", self.lsq_var, self.lsq_mean)] {
            s.push_str(name);
            for v in var.iter().chain(&mean) {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Smooth field `base·(1 + p·g)` with `g ∈ [-1, 1]` a sum of two random
/// low-frequency sinusoids, drawn independently per parameter.
fn draw_field<R: Rng + ?Sized>(cfg: &RepeatConfig, rng: &mut R) -> Vec<IvimParams> {
    let [nx, ny] = cfg.roi;
    let waves: Vec<[f64; 6]> = (0..N_PARAMS)
        .map(|_| std::array::from_fn(|k| if k < 4 { rng.random_range(0.0..1.0) } else { rng.random_range(0.0..2.0 * PI) }))
        .collect();
    let mut field = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let (u, v) = (x as f64 / nx as f64, y as f64 / ny as f64);
            let vals: [f64; N_PARAMS] = std::array::from_fn(|j| {
                let [kx1, ky1, kx2, ky2, p1, p2] = waves[j];
                let g = 0.5 * ((2.0 * PI * (kx1 * u + ky1 * v) + p1).sin() + (2.0 * PI * (kx2 * u + ky2 * v) + p2).sin());
                cfg.base[j] * (1.0 + cfg.perturbation * g)
            });
            field.push(IvimParams::from_array(vals).expect("field stays admissible"));
        }
    }
    field
}

fn column(rows: &[[f64; N_PARAMS]], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

/// Subject `s` draws its field from stream 0 of child `s`; session `a`,
/// voxel `v` uses stream `((a + 1) << 32) | v` of the same child.
pub fn synthetic_repeatability_study(
    model: &MlpModel,
    lsq_config: &LsqConfig,
    protocol: &AcquisitionProtocol,
    config: &RepeatConfig,
) -> Result<RepeatabilityReport, EvalError> {
    if config.n_subjects < 2 {
        return Err(EvalError::InvalidSpec("n_subjects must be >= 2".into()));
    }
    if config.roi.contains(&0) {
        return Err(EvalError::InvalidSpec("roi must be nonempty".into()));
    }
    if !(config.perturbation >= 0.0 && config.perturbation < 1.0) {
        return Err(EvalError::InvalidSpec("perturbation must lie in [0, 1)".into()));
    }
    IvimParams::from_array(config.base).map_err(|e| EvalError::InvalidSpec(format!("base: {e}")))?;
    check_model(model, protocol)?;
    lsq_config.validate_for(protocol)?;
    let protocol = protocol.with_noise_scale(config.noise_scale)?;
    let root = SeedStream::new(config.seed, Domain::Repeat);

    let subjects: Vec<SubjectRoiMeans> = (0..config.n_subjects)
        .into_par_iter()
        .map(|s| {
            let stream = root.child(s as u64);
            let field = draw_field(config, &mut stream.rng(0));
            let mask = vec![true; field.len()];
            let mut truth = [0.0; N_PARAMS];
            let truth_rows: Vec<[f64; N_PARAMS]> = field.iter().map(|p| p.to_array()).collect();
            for (j, t) in truth.iter_mut().enumerate() {
                *t = roi_mean(&column(&truth_rows, j), &mask).expect("nonempty roi");
            }
            let mut agp = [[f64::NAN; N_PARAMS]; 2];
            let mut lsq = [[f64::NAN; N_PARAMS]; 2];
            for a in 0..2u64 {
                let signals: Vec<_> = field
                    .iter()
                    .enumerate()
                    .map(|(v, p)| {
                        let mut rng = stream.rng(((a + 1) << 32) | v as u64);
                        simulate_signal(p, &protocol, config.with_dephasing, &mut rng)
                    })
                    .collect();
                let refs: Vec<&[f64]> = signals.iter().map(|x| x.values()).collect();
                let agp_rows: Vec<[f64; N_PARAMS]> = model
                    .forward_batch(&refs)
                    .expect("width checked")
                    .iter()
                    .map(|p| p.mean)
                    .collect();
                let lsq_rows: Vec<[f64; N_PARAMS]> = signals
                    .iter()
                    .map(|x| {
                        fit_lsq(x, &protocol, lsq_config)
                            .map(|r| r.params.to_array())
                            .unwrap_or([f64::NAN; N_PARAMS])
                    })
                    .collect();
                for j in 0..N_PARAMS {
                    agp[a as usize][j] = roi_mean(&column(&agp_rows, j), &mask).unwrap_or(f64::NAN);
                    lsq[a as usize][j] = roi_mean(&column(&lsq_rows, j), &mask).unwrap_or(f64::NAN);
                }
            }
            SubjectRoiMeans { truth, agp, lsq }
        })
        .collect();

    let var_and_mean = |sessions: &dyn Fn(&SubjectRoiMeans) -> [[f64; N_PARAMS]; 2]| -> Result<([f64; 3], [f64; 3]), EvalError> {
        let mut var = [0.0; 3];
        let mut mean = [0.0; 3];
        for (k, &j) in REPORTED.iter().enumerate() {
            let t: Vec<f64> = subjects.iter().map(|s| sessions(s)[0][j]).collect();
            let r: Vec<f64> = subjects.iter().map(|s| sessions(s)[1][j]).collect();
            var[k] = repeatability_var(&t, &r)?;
            mean[k] = t.iter().chain(&r).sum::<f64>() / (2 * t.len()) as f64;
        }
        Ok((var, mean))
    };
    let (agp_var, agp_mean) = var_and_mean(&|s| s.agp)?;
    let (lsq_var, lsq_mean) = var_and_mean(&|s| s.lsq)?;
    Ok(RepeatabilityReport {
        config: *config,
        protocol_fingerprint: protocol.fingerprint(),
        agp_var,
        lsq_var,
        agp_mean,
        lsq_mean,
        subjects,
    })
}
