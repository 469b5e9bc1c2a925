//! Symmetric 3x3 diffusion tensors, prolate construction from (MD, FA), and
//! uniform random rotations.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("fractional anisotropy {0} outside [0, 1)")]
    FaOutOfRange(f64),
    #[error("fractional anisotropy {fa} not reachable with axial/radial ratio <= {max_ratio}")]
    FaUnreachable { fa: f64, max_ratio: f64 },
    #[error("mean ADC must be positive and finite, got {0}")]
    NonPositiveMeanAdc(f64),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("tensor is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("gradient direction has norm {0}, expected unit length")]
    NonUnitGradient(f64),
    #[error("perfusion fraction {0} outside [0, 1]")]
    Fraction(f64),
}

/// Tolerance on |g| - 1 for gradient directions.
pub const UNIT_TOL: f64 = 1e-9;

/// Upper bracket for the axial/radial eigenvalue ratio search.
pub const MAX_PROLATE_RATIO: f64 = 1e3;

/// Symmetric tensor stored as its 6 unique components `[xx, xy, xz, yy, yz, zz]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor([f64; 6]);

impl SymTensor {
    pub fn isotropic(value: f64) -> Self {
        Self([value, 0.0, 0.0, value, 0.0, value])
    }

    pub fn from_components(c: [f64; 6]) -> Self {
        Self(c)
    }

    pub fn components(&self) -> [f64; 6] {
        self.0
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, TensorError> {
        let asym = (m - m.transpose()).abs().max();
        let scale = m.abs().max().max(f64::MIN_POSITIVE);
        if asym > 1e-12 * scale {
            return Err(TensorError::NotSymmetric(asym));
        }
        Ok(Self([
            m[(0, 0)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            m[(1, 1)],
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            m[(2, 2)],
        ]))
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3] + self.0[5]
    }

    /// `gᵀ T g`.
    pub fn quad_form(&self, g: &Vector3<f64>) -> f64 {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        xx * g.x * g.x
            + yy * g.y * g.y
            + zz * g.z * g.z
            + 2.0 * (xy * g.x * g.y + xz * g.x * g.z + yz * g.y * g.z)
    }

    /// Eigenvalues sorted descending.
    pub fn eigenvalues(&self) -> [f64; 3] {
        let e = SymmetricEigen::new(self.to_matrix()).eigenvalues;
        let mut v = [e[0], e[1], e[2]];
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn fractional_anisotropy(&self) -> f64 {
        fractional_anisotropy(self.eigenvalues())
    }

    pub fn check_psd(&self) -> Result<(), TensorError> {
        let min = self.eigenvalues()[2];
        let scale = self.0.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if min < -1e-12 * scale {
            return Err(TensorError::NotPsd(min));
        }
        Ok(())
    }

    pub fn rotated(&self, r: &UnitQuaternion<f64>) -> Self {
        let rm = r.to_rotation_matrix();
        let m = rm.matrix() * self.to_matrix() * rm.matrix().transpose();
        // R T Rᵀ is symmetric up to rounding; symmetrize explicitly.
        let s = 0.5 * (m + m.transpose());
        Self::from_matrix(&s).expect("symmetrized matrix")
    }
}

/// FA of an eigenvalue triple.
pub fn fractional_anisotropy(l: [f64; 3]) -> f64 {
    let num = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[2] - l[0]).powi(2);
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if den == 0.0 {
        return 0.0;
    }
    (0.5 * num / den).sqrt()
}

/// FA of the prolate triple `(r, 1, 1)`.
fn prolate_fa(ratio: f64) -> f64 {
    (ratio - 1.0) / (ratio * ratio + 2.0).sqrt()
}

/// Axial/radial ratio `r >= 1` with `FA(r, 1, 1) = fa`, by bisection.
pub fn prolate_ratio_for_fa(fa: f64) -> Result<f64, TensorError> {
    if !(0.0..1.0).contains(&fa) {
        return Err(TensorError::FaOutOfRange(fa));
    }
    if fa > prolate_fa(MAX_PROLATE_RATIO) {
        return Err(TensorError::FaUnreachable {
            fa,
            max_ratio: MAX_PROLATE_RATIO,
        });
    }
    if fa == 0.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (1.0f64, MAX_PROLATE_RATIO);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let resid = prolate_fa(mid) - fa;
        if resid.abs() <= 1e-13 || hi - lo <= 4.0 * f64::EPSILON * mid {
            return Ok(mid);
        }
        // prolate_fa is increasing in r on [1, inf)
        if resid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Eigenvalues `(axial, radial, radial)` with mean `mean_adc` and the given FA.
pub fn prolate_eigenvalues(mean_adc: f64, fa: f64) -> Result<[f64; 3], TensorError> {
    if !(mean_adc > 0.0 && mean_adc.is_finite()) {
        return Err(TensorError::NonPositiveMeanAdc(mean_adc));
    }
    let r = prolate_ratio_for_fa(fa)?;
    let radial = 3.0 * mean_adc / (r + 2.0);
    Ok([r * radial, radial, radial])
}

/// Axially symmetric tensor with principal axis `rotation * x̂`.
pub fn prolate_tensor_from_mean_adc_fa(
    mean_adc: f64,
    fa: f64,
    rotation: &UnitQuaternion<f64>,
) -> Result<SymTensor, TensorError> {
    let [a, b, c] = prolate_eigenvalues(mean_adc, fa)?;
    let diag = SymTensor([a, 0.0, 0.0, b, 0.0, c]);
    Ok(diag.rotated(rotation))
}

/// Uniform draw over SO(3) (Shoemake's subgroup algorithm).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = Quaternion::new(
        b * (2.0 * PI * u3).cos(),
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
    );
    UnitQuaternion::new_normalize(q)
}

/// Diffusion and pseudo-diffusion tensors of one voxel plus its perfusion fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTensorPair {
    d_tensor: SymTensor,
    d_star_tensor: SymTensor,
    f: f64,
}

impl DiffusionTensorPair {
    pub fn new(d_tensor: SymTensor, d_star_tensor: SymTensor, f: f64) -> Result<Self, TensorError> {
        if !(0.0..=1.0).contains(&f) {
            return Err(TensorError::Fraction(f));
        }
        d_tensor.check_psd()?;
        d_star_tensor.check_psd()?;
        Ok(Self {
            d_tensor,
            d_star_tensor,
            f,
        })
    }

    pub fn isotropic(f: f64, d: f64, d_star: f64) -> Result<Self, TensorError> {
        Self::new(SymTensor::isotropic(d), SymTensor::isotropic(d_star), f)
    }

    pub fn d_tensor(&self) -> &SymTensor {
        &self.d_tensor
    }

    pub fn d_star_tensor(&self) -> &SymTensor {
        &self.d_star_tensor
    }

    pub fn f(&self) -> f64 {
        self.f
    }
}

pub fn check_unit(g: &Vector3<f64>) -> Result<(), TensorError> {
    let n = g.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(TensorError::NonUnitGradient(n));
    }
    Ok(())
}

/// The four even-parity cube diagonals `(±1, ±1, ±1)/√3`.
pub fn tetrahedral_directions() -> [Vector3<f64>; 4] {
    let s = 1.0 / 3f64.sqrt();
    [
        Vector3::new(s, s, s),
        Vector3::new(s, -s, -s),
        Vector3::new(-s, s, -s),
        Vector3::new(-s, -s, s),
    ]
}
