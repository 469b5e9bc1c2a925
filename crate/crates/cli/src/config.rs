//! TOML run configuration. Every section is optional and falls back to the
//! library defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use ivim_core::abc::{AbcConfig, AbcDistance};
use ivim_core::agp::TrainConfig;
use ivim_core::lsq::LsqConfig;
use ivim_core::protocol::{DephaseSchedule, DEFAULT_B_VALUES, DEFAULT_NOISE_SIGMAS};
use ivim_core::tensor::tetrahedral_directions;
use ivim_core::{AcquisitionProtocol, ParamPrior};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Smoke,
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub protocol: ProtocolSection,
    pub prior: PriorSection,
    pub lsq: LsqSection,
    pub train: TrainSection,
    pub abc: AbcSection,
    pub eval: EvalSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub b_values: Vec<f64>,
    pub noise_sigmas: Vec<f64>,
    /// Unit gradient directions; the tetrahedral set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradients: Option<Vec<[f64; 3]>>,
    /// Explicit per-b dephasing probabilities; overrides `dephase`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dephase_probs: Option<Vec<f64>>,
    pub dephase: DephaseSection,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            b_values: DEFAULT_B_VALUES.to_vec(),
            noise_sigmas: DEFAULT_NOISE_SIGMAS.to_vec(),
            gradients: None,
            dephase_probs: None,
            dephase: DephaseSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DephaseSection {
    pub low_b_prob: f64,
    pub threshold: f64,
    pub start_prob: f64,
    pub end_prob: f64,
    pub end_b: f64,
}

impl Default for DephaseSection {
    fn default() -> Self {
        let d = DephaseSchedule::default();
        Self {
            low_b_prob: d.low_b_prob,
            threshold: d.threshold,
            start_prob: d.start_prob,
            end_prob: d.end_prob,
            end_b: d.end_b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub s0: [f64; 2],
    pub f: [f64; 2],
    pub d: [f64; 2],
    pub d_star: [f64; 2],
}

impl Default for PriorSection {
    fn default() -> Self {
        let p = ParamPrior::default();
        let (lo, hi) = (p.lo(), p.hi());
        Self {
            s0: [lo[0], hi[0]],
            f: [lo[1], hi[1]],
            d: [lo[2], hi[2]],
            d_star: [lo[3], hi[3]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsqSection {
    pub segmentation_threshold: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub fix_s0_from_stage1: bool,
}

impl Default for LsqSection {
    fn default() -> Self {
        let c = LsqConfig::default();
        Self {
            segmentation_threshold: c.segmentation_threshold,
            max_iterations: c.max_iterations,
            convergence_tol: c.convergence_tol,
            fix_s0_from_stage1: c.fix_s0_from_stage1,
        }
    }
}

/// Sizes left unset come from the preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_interval: Option<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            preset: Preset::Desk,
            iterations: None,
            batch_size: None,
            learning_rate: None,
            checkpoint_interval: None,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcSection {
    pub n_proposals: usize,
    pub acceptance_quantile: f64,
    pub distance: DistanceName,
    pub with_dephasing: bool,
    /// Random test signals for `oracle` when no signal file is given.
    pub n_signals: usize,
    pub f_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceName {
    #[default]
    Euclidean,
}

impl Default for AbcSection {
    fn default() -> Self {
        let a = AbcConfig::default();
        Self {
            n_proposals: a.n_proposals,
            acceptance_quantile: a.acceptance_quantile,
            distance: DistanceName::Euclidean,
            with_dephasing: a.with_dephasing,
            n_signals: 20,
            f_range: [0.1, 0.4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_cases: usize,
    pub grid_resolution: usize,
    pub grid_realizations: usize,
    pub repeat_subjects: usize,
    pub repeat_roi: [usize; 2],
    pub repeat_noise_scale: f64,
    pub repeat_with_dephasing: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_cases: 1024,
            grid_resolution: 100,
            grid_realizations: 100,
            repeat_subjects: 17,
            repeat_roi: [8, 8],
            repeat_noise_scale: 1.0,
            repeat_with_dephasing: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub dims: [usize; 3],
    pub with_dephasing: bool,
    /// Constant ground truth `[s0, f, d, d_star]`; prior draws per voxel when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<[f64; 4]>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            dims: [8, 8, 1],
            with_dephasing: true,
            params: None,
        }
    }
}

fn cfg_err(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks every section against its library type before anything runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let protocol = self.protocol()?;
        self.prior()?;
        self.lsq()?
            .validate_for(&protocol)
            .map_err(|e| cfg_err("lsq", e))?;
        self.train()?;
        self.abc()?;
        let a = &self.abc;
        if a.n_signals == 0 {
            return Err(cfg_err("abc.n_signals", "must be >= 1"));
        }
        if !(a.f_range[0] >= 0.0 && a.f_range[0] <= a.f_range[1] && a.f_range[1] <= 1.0) {
            return Err(cfg_err("abc.f_range", "must be an increasing range inside [0, 1]"));
        }
        let e = &self.eval;
        if e.n_cases == 0 {
            return Err(cfg_err("eval.n_cases", "must be >= 1"));
        }
        if e.grid_resolution < 2 {
            return Err(cfg_err("eval.grid_resolution", "must be >= 2"));
        }
        if e.grid_realizations == 0 {
            return Err(cfg_err("eval.grid_realizations", "must be >= 1"));
        }
        if e.repeat_subjects < 2 {
            return Err(cfg_err("eval.repeat_subjects", "must be >= 2"));
        }
        if e.repeat_roi.contains(&0) {
            return Err(cfg_err("eval.repeat_roi", "must be nonempty"));
        }
        if !(e.repeat_noise_scale > 0.0 && e.repeat_noise_scale.is_finite()) {
            return Err(cfg_err("eval.repeat_noise_scale", "must be > 0"));
        }
        if self.simulate.dims.contains(&0) {
            return Err(cfg_err("simulate.dims", "every dimension must be >= 1"));
        }
        if let Some(p) = self.simulate.params {
            ivim_core::IvimParams::from_array(p).map_err(|e| cfg_err("simulate.params", e))?;
        }
        Ok(())
    }

    pub fn protocol(&self) -> Result<AcquisitionProtocol, CliError> {
        let p = &self.protocol;
        let dirs = match &p.gradients {
            Some(g) => g.iter().map(|v| nalgebra::Vector3::new(v[0], v[1], v[2])).collect(),
            None => tetrahedral_directions().to_vec(),
        };
        let probs = match &p.dephase_probs {
            Some(v) => v.clone(),
            None => {
                let d = p.dephase;
                DephaseSchedule {
                    low_b_prob: d.low_b_prob,
                    threshold: d.threshold,
                    start_prob: d.start_prob,
                    end_prob: d.end_prob,
                    end_b: d.end_b,
                }
                .probs_for(&p.b_values)
            }
        };
        AcquisitionProtocol::new(p.b_values.clone(), dirs, p.noise_sigmas.clone(), probs)
            .map_err(|e| cfg_err("protocol", e))
    }

    pub fn prior(&self) -> Result<ParamPrior, CliError> {
        let p = &self.prior;
        ParamPrior::new([p.s0[0], p.f[0], p.d[0], p.d_star[0]], [p.s0[1], p.f[1], p.d[1], p.d_star[1]])
            .map_err(|e| cfg_err("prior", e))
    }

    pub fn lsq(&self) -> Result<LsqConfig, CliError> {
        let s = &self.lsq;
        let c = LsqConfig {
            segmentation_threshold: s.segmentation_threshold,
            bounds: self.prior()?,
            max_iterations: s.max_iterations,
            convergence_tol: s.convergence_tol,
            fix_s0_from_stage1: s.fix_s0_from_stage1,
        };
        c.validate().map_err(|e| cfg_err("lsq", e))?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let base = match t.preset {
            Preset::Smoke => TrainConfig::smoke(),
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        };
        let c = TrainConfig {
            iterations: t.iterations.unwrap_or(base.iterations),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            checkpoint_interval: t.checkpoint_interval.unwrap_or(base.checkpoint_interval),
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: self.seed,
        };
        c.validate().map_err(|e| cfg_err("train", e))?;
        Ok(c)
    }

    pub fn abc(&self) -> Result<AbcConfig, CliError> {
        let a = &self.abc;
        let c = AbcConfig {
            n_proposals: a.n_proposals,
            acceptance_quantile: a.acceptance_quantile,
            distance: match a.distance {
                DistanceName::Euclidean => AbcDistance::Euclidean,
            },
            seed: self.seed,
            with_dephasing: a.with_dephasing,
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }
}
