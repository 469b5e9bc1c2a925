//! Acquisition protocol (b-values, gradients, noise levels, dephasing) and the
//! trace-signal container.

use nalgebra::Vector3;
use thiserror::Error;

use crate::tensor::{tetrahedral_directions, UNIT_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("b_values: protocol needs at least one b-value")]
    NoBValues,
    #[error("b_values[{index}]: {value} is negative or not finite")]
    InvalidB { index: usize, value: f64 },
    #[error("b_values[{index}]: {value} is not strictly greater than the previous b-value")]
    BValuesNotIncreasing { index: usize, value: f64 },
    #[error("gradient_dirs: protocol needs at least one gradient direction")]
    NoGradients,
    #[error("gradient_dirs[{index}]: norm {norm} is not 1")]
    NonUnitGradient { index: usize, norm: f64 },
    #[error("noise_sigmas[{index}]: {value} must be > 0")]
    InvalidSigma { index: usize, value: f64 },
    #[error("dephase_probs[{index}]: {value} outside [0, 1]")]
    InvalidDephaseProb { index: usize, value: f64 },
    #[error("{field}: expected {expected} entries, found {found}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("signal: value {value} at index {index} is negative or not finite")]
    InvalidSignal { index: usize, value: f64 },
}

/// The b-values of the reference acquisition: one b0 plus 16 weighted images.
pub const DEFAULT_B_VALUES: [f64; 17] = [
    0.0, 10.0, 20.0, 30.0, 40.0, 60.0, 80.0, 100.0, 150.0, 200.0, 300.0, 400.0, 500.0, 600.0,
    700.0, 800.0, 900.0,
];

/// Rician noise level per tetrahedral gradient.
pub const DEFAULT_NOISE_SIGMAS: [f64; 4] = [6.0, 10.0, 14.0, 18.0];

/// b-dependent motion dephasing probability: constant below `threshold`, then
/// linear from `start_prob` at `threshold` to `end_prob` at `end_b`, held after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DephaseSchedule {
    pub low_b_prob: f64,
    pub threshold: f64,
    pub start_prob: f64,
    pub end_prob: f64,
    pub end_b: f64,
}

impl Default for DephaseSchedule {
    fn default() -> Self {
        Self {
            low_b_prob: 0.02,
            threshold: 300.0,
            start_prob: 0.10,
            end_prob: 0.25,
            end_b: 900.0,
        }
    }
}

impl DephaseSchedule {
    pub fn prob(&self, b: f64) -> f64 {
        if b < self.threshold {
            return self.low_b_prob;
        }
        let span = self.end_b - self.threshold;
        let t = if span > 0.0 {
            ((b - self.threshold) / span).min(1.0)
        } else {
            1.0
        };
        self.start_prob + (self.end_prob - self.start_prob) * t
    }

    pub fn probs_for(&self, b_values: &[f64]) -> Vec<f64> {
        b_values.iter().map(|&b| self.prob(b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionProtocol {
    b_values: Vec<f64>,
    gradient_dirs: Vec<Vector3<f64>>,
    noise_sigmas: Vec<f64>,
    dephase_probs: Vec<f64>,
}

impl AcquisitionProtocol {
    pub fn new(
        b_values: Vec<f64>,
        gradient_dirs: Vec<Vector3<f64>>,
        noise_sigmas: Vec<f64>,
        dephase_probs: Vec<f64>,
    ) -> Result<Self, ProtocolError> {
        if b_values.is_empty() {
            return Err(ProtocolError::NoBValues);
        }
        for (index, &value) in b_values.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ProtocolError::InvalidB { index, value });
            }
            if index > 0 && value <= b_values[index - 1] {
                return Err(ProtocolError::BValuesNotIncreasing { index, value });
            }
        }
        if gradient_dirs.is_empty() {
            return Err(ProtocolError::NoGradients);
        }
        for (index, g) in gradient_dirs.iter().enumerate() {
            let norm = g.norm();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(ProtocolError::NonUnitGradient { index, norm });
            }
        }
        if noise_sigmas.len() != gradient_dirs.len() {
            return Err(ProtocolError::LengthMismatch {
                field: "noise_sigmas",
                expected: gradient_dirs.len(),
                found: noise_sigmas.len(),
            });
        }
        for (index, &value) in noise_sigmas.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ProtocolError::InvalidSigma { index, value });
            }
        }
        if dephase_probs.len() != b_values.len() {
            return Err(ProtocolError::LengthMismatch {
                field: "dephase_probs",
                expected: b_values.len(),
                found: dephase_probs.len(),
            });
        }
        for (index, &value) in dephase_probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ProtocolError::InvalidDephaseProb { index, value });
            }
        }
        Ok(Self {
            b_values,
            gradient_dirs,
            noise_sigmas,
            dephase_probs,
        })
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b_values
    }

    pub fn gradient_dirs(&self) -> &[Vector3<f64>] {
        &self.gradient_dirs
    }

    pub fn noise_sigmas(&self) -> &[f64] {
        &self.noise_sigmas
    }

    pub fn dephase_probs(&self) -> &[f64] {
        &self.dephase_probs
    }

    pub fn n_b(&self) -> usize {
        self.b_values.len()
    }

    pub fn n_g(&self) -> usize {
        self.gradient_dirs.len()
    }

    /// Noise levels multiplied by `k > 0`.
    pub fn with_noise_scale(&self, k: f64) -> Result<Self, ProtocolError> {
        let sigmas = self.noise_sigmas.iter().map(|s| s * k).collect();
        Self::new(
            self.b_values.clone(),
            self.gradient_dirs.clone(),
            sigmas,
            self.dephase_probs.clone(),
        )
    }

    pub fn with_dephase_probs(&self, probs: Vec<f64>) -> Result<Self, ProtocolError> {
        Self::new(
            self.b_values.clone(),
            self.gradient_dirs.clone(),
            self.noise_sigmas.clone(),
            probs,
        )
    }

    /// Index of the b = 0 image, if acquired.
    pub fn b0_index(&self) -> Option<usize> {
        self.b_values.iter().position(|&b| b == 0.0)
    }

    /// CRC-32 over the little-endian bytes of every field.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.b_values {
            h.update(&v.to_le_bytes());
        }
        for g in &self.gradient_dirs {
            for c in g.iter() {
                h.update(&c.to_le_bytes());
            }
        }
        for v in self.noise_sigmas.iter().chain(&self.dephase_probs) {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    pub fn check_signal(&self, signal: &SignalVector) -> Result<(), ProtocolError> {
        if signal.len() != self.n_b() {
            return Err(ProtocolError::LengthMismatch {
                field: "signal",
                expected: self.n_b(),
                found: signal.len(),
            });
        }
        Ok(())
    }
}

/// The reference fetal acquisition: 17 b-values, four tetrahedral gradients
/// with noise levels spanning 6..18, and the default dephasing schedule.
pub fn default_protocol() -> AcquisitionProtocol {
    let b = DEFAULT_B_VALUES.to_vec();
    let probs = DephaseSchedule::default().probs_for(&b);
    AcquisitionProtocol::new(
        b,
        tetrahedral_directions().to_vec(),
        DEFAULT_NOISE_SIGMAS.to_vec(),
        probs,
    )
    .expect("default protocol is valid")
}

/// Trace signal, one nonnegative magnitude per b-value.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVector(Vec<f64>);

impl SignalVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProtocolError> {
        for (index, &value) in values.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ProtocolError::InvalidSignal { index, value });
            }
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0));
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Result<Self, ProtocolError> {
        Self::new(self.0.iter().map(|v| v * k).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}
