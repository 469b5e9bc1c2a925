//! IVIM parameter vectors and the uniform prior over the admissible set.

use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Number of IVIM model parameters (S0, f, D, D*).
pub const N_PARAMS: usize = 4;

pub const S0: usize = 0;
pub const F: usize = 1;
pub const D: usize = 2;
pub const D_STAR: usize = 3;

pub const PARAM_NAMES: [&str; N_PARAMS] = ["s0", "f", "d", "d_star"];
pub const PARAM_UNITS: [&str; N_PARAMS] = ["a.u.", "1", "mm2/s", "mm2/s"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("parameter {name} = {value} is not finite")]
    NotFinite { name: &'static str, value: f64 },
    #[error("s0 must be >= 0, got {0}")]
    NegativeS0(f64),
    #[error("f must lie in [0, 1], got {0}")]
    FractionOutOfRange(f64),
    #[error("d must be > 0, got {0}")]
    NonPositiveD(f64),
    #[error("d ({d}) must not exceed d_star ({d_star})")]
    Ordering { d: f64, d_star: f64 },
    #[error("prior bound for {name}: lo {lo} > hi {hi}")]
    InvertedBounds { name: &'static str, lo: f64, hi: f64 },
    #[error("prior admits no d <= d_star (d lo {d_lo} > d_star hi {d_star_hi})")]
    EmptyAdmissibleSet { d_lo: f64, d_star_hi: f64 },
}

/// A validated IVIM parameter set `{S0, f, D, D*}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvimParams {
    s0: f64,
    f: f64,
    d: f64,
    d_star: f64,
}

impl IvimParams {
    pub fn new(s0: f64, f: f64, d: f64, d_star: f64) -> Result<Self, ParamError> {
        for (name, value) in PARAM_NAMES.iter().zip([s0, f, d, d_star]) {
            if !value.is_finite() {
                return Err(ParamError::NotFinite { name, value });
            }
        }
        if s0 < 0.0 {
            return Err(ParamError::NegativeS0(s0));
        }
        if !(0.0..=1.0).contains(&f) {
            return Err(ParamError::FractionOutOfRange(f));
        }
        if d <= 0.0 {
            return Err(ParamError::NonPositiveD(d));
        }
        if d > d_star {
            return Err(ParamError::Ordering { d, d_star });
        }
        Ok(Self { s0, f, d, d_star })
    }

    pub fn from_array(v: [f64; N_PARAMS]) -> Result<Self, ParamError> {
        Self::new(v[S0], v[F], v[D], v[D_STAR])
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn d_star(&self) -> f64 {
        self.d_star
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [self.s0, self.f, self.d, self.d_star]
    }

    /// Same shape parameters with the amplitude replaced.
    pub fn with_s0(&self, s0: f64) -> Result<Self, ParamError> {
        Self::new(s0, self.f, self.d, self.d_star)
    }
}

impl fmt::Display for IvimParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S0={:.4} f={:.5} D={:.4e} D*={:.4e}",
            self.s0, self.f, self.d, self.d_star
        )
    }
}

/// Box prior `p(y)`: independent uniforms on `[lo, hi]`, restricted to `D <= D*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamPrior {
    lo: [f64; N_PARAMS],
    hi: [f64; N_PARAMS],
}

impl Default for ParamPrior {
    fn default() -> Self {
        Self {
            lo: [0.0, 0.0005, 0.045e-3, 0.34e-3],
            hi: [3000.0, 0.9995, 5e-3, 100e-3],
        }
    }
}

impl ParamPrior {
    /// Bounds may coincide (a point mass) but must not be inverted.
    pub fn new(lo: [f64; N_PARAMS], hi: [f64; N_PARAMS]) -> Result<Self, ParamError> {
        for j in 0..N_PARAMS {
            let name = PARAM_NAMES[j];
            if !lo[j].is_finite() {
                return Err(ParamError::NotFinite { name, value: lo[j] });
            }
            if !hi[j].is_finite() {
                return Err(ParamError::NotFinite { name, value: hi[j] });
            }
            if lo[j] > hi[j] {
                return Err(ParamError::InvertedBounds { name, lo: lo[j], hi: hi[j] });
            }
        }
        // Both corners must themselves be admissible parameter values.
        IvimParams::new(lo[S0], lo[F], lo[D], lo[D].max(lo[D_STAR]))?;
        IvimParams::new(hi[S0], hi[F], hi[D].min(hi[D_STAR]), hi[D_STAR])?;
        if lo[D] > hi[D_STAR] {
            return Err(ParamError::EmptyAdmissibleSet {
                d_lo: lo[D],
                d_star_hi: hi[D_STAR],
            });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> [f64; N_PARAMS] {
        self.lo
    }

    pub fn hi(&self) -> [f64; N_PARAMS] {
        self.hi
    }

    pub fn width(&self, j: usize) -> f64 {
        self.hi[j] - self.lo[j]
    }

    pub fn contains(&self, p: &IvimParams) -> bool {
        p.to_array()
            .iter()
            .enumerate()
            .all(|(j, v)| *v >= self.lo[j] && *v <= self.hi[j])
    }

    /// Copy of this prior with one parameter's range replaced.
    pub fn with_range(&self, j: usize, lo: f64, hi: f64) -> Result<Self, ParamError> {
        let mut l = self.lo;
        let mut h = self.hi;
        l[j] = lo;
        h[j] = hi;
        Self::new(l, h)
    }

    /// Componentwise uniform draw, redrawn whole until `D <= D*`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> IvimParams {
        loop {
            let mut v = [0.0; N_PARAMS];
            for (j, slot) in v.iter_mut().enumerate() {
                let u: f64 = rng.random();
                *slot = self.lo[j] + u * (self.hi[j] - self.lo[j]);
            }
            if v[D] <= v[D_STAR] {
                if let Ok(p) = IvimParams::from_array(v) {
                    return p;
                }
            }
        }
    }
}

/// Free function form of [`ParamPrior::sample`].
pub fn sample_prior<R: Rng + ?Sized>(prior: &ParamPrior, rng: &mut R) -> IvimParams {
    prior.sample(rng)
}
