//! Noiseless bi-exponential IVIM forward signals.

use nalgebra::Vector3;

use crate::params::IvimParams;
use crate::tensor::{check_unit, DiffusionTensorPair, TensorError};

/// `S0 (f exp(-b D*) + (1 - f) exp(-b D))`.
pub fn signal_isotropic(params: &IvimParams, b: f64) -> f64 {
    biexp(params.s0(), params.f(), params.d(), params.d_star(), b)
}

#[inline]
pub(crate) fn biexp(s0: f64, f: f64, d: f64, d_star: f64, b: f64) -> f64 {
    s0 * (f * (-b * d_star).exp() + (1.0 - f) * (-b * d).exp())
}

/// Directional signal for unit gradient `g`: the scalar coefficients are
/// replaced by the apparent diffusivities `gᵀ D g` and `gᵀ D* g`.
pub fn signal_anisotropic(
    tensors: &DiffusionTensorPair,
    s0: f64,
    b: f64,
    g: &Vector3<f64>,
) -> Result<f64, TensorError> {
    check_unit(g)?;
    Ok(signal_anisotropic_unchecked(tensors, s0, b, g))
}

#[inline]
pub(crate) fn signal_anisotropic_unchecked(
    tensors: &DiffusionTensorPair,
    s0: f64,
    b: f64,
    g: &Vector3<f64>,
) -> f64 {
    let adc = tensors.d_tensor().quad_form(g);
    let adc_star = tensors.d_star_tensor().quad_form(g);
    biexp(s0, tensors.f(), adc, adc_star, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::{prolate_eigenvalues, prolate_tensor_from_mean_adc_fa, random_rotation, tetrahedral_directions, SymTensor};
    use proptest::prelude::*;

    fn reference() -> IvimParams {
        IvimParams::new(1000.0, 0.2, 1e-3, 0.02).unwrap()
    }

    #[test]
    fn b_zero_is_s0() {
        assert_eq!(signal_isotropic(&reference(), 0.0), 1000.0);
    }

    #[test]
    fn f_zero_is_monoexponential() {
        let p = IvimParams::new(1000.0, 0.0, 1e-3, 0.02).unwrap();
        assert!((signal_isotropic(&p, 500.0) - 606.530_659_712_633_4).abs() < 1e-9);
    }

    #[test]
    fn b100_matches_high_precision_value() {
        // 1000 * (0.2 e^{-2} + 0.8 e^{-0.1}), evaluated with mpmath at 50 digits:
        // 750.93699107609019691...
        let s = signal_isotropic(&reference(), 100.0);
        assert!((s - 750.936_991_076_090_2).abs() < 1e-10, "{s}");
    }

    #[test]
    fn isotropic_tensors_match_scalar_model() {
        let p = reference();
        let t = DiffusionTensorPair::isotropic(p.f(), p.d(), p.d_star()).unwrap();
        let mut rng = seeded(4);
        for _ in 0..50 {
            let g = random_rotation(&mut rng) * Vector3::x();
            let b: f64 = rand::Rng::random_range(&mut rng, 0.0..1000.0);
            let a = signal_anisotropic(&t, p.s0(), b, &g).unwrap();
            assert!((a - signal_isotropic(&p, b)).abs() < 1e-10);
        }
    }

    #[test]
    fn anisotropic_b0_and_principal_axis() {
        let mut rng = seeded(6);
        let r = random_rotation(&mut rng);
        let dt = prolate_tensor_from_mean_adc_fa(1e-3, 0.8, &r).unwrap();
        let dst = prolate_tensor_from_mean_adc_fa(2e-2, 0.5, &r).unwrap();
        let pair = DiffusionTensorPair::new(dt, dst, 0.3).unwrap();
        for g in tetrahedral_directions() {
            assert_eq!(signal_anisotropic(&pair, 700.0, 0.0, &g).unwrap(), 700.0);
        }
        let axis = r * Vector3::x();
        let l = prolate_eigenvalues(1e-3, 0.8).unwrap();
        let ls = prolate_eigenvalues(2e-2, 0.5).unwrap();
        let expected = 700.0 * (0.3 * (-500.0 * ls[0]).exp() + 0.7 * (-500.0 * l[0]).exp());
        let got = signal_anisotropic(&pair, 700.0, 500.0, &axis).unwrap();
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn non_unit_gradient_rejected() {
        let t = DiffusionTensorPair::new(SymTensor::isotropic(1e-3), SymTensor::isotropic(1e-2), 0.1).unwrap();
        let g = Vector3::new(1.0, 1e-4, 0.0);
        assert!(matches!(
            signal_anisotropic(&t, 1.0, 100.0, &g),
            Err(TensorError::NonUnitGradient(_))
        ));
    }

    proptest! {
        #[test]
        fn strictly_decreasing_in_b(
            s0 in 1.0..3000.0f64,
            f in 0.0..1.0f64,
            d in 1e-5..5e-3f64,
            ratio in 1.0..100.0f64,
            b in 0.0..1500.0f64,
            db in 1.0..200.0f64,
        ) {
            let p = IvimParams::new(s0, f, d, d * ratio).unwrap();
            prop_assert!(signal_isotropic(&p, b) > signal_isotropic(&p, b + db));
            prop_assert!(signal_isotropic(&p, b) > 0.0);
        }

        #[test]
        fn linear_in_s0(
            s0 in 0.0..3000.0f64,
            k in 0.0..10.0f64,
            f in 0.0..1.0f64,
            b in 0.0..1000.0f64,
        ) {
            let p = IvimParams::new(s0, f, 1e-3, 2e-2).unwrap();
            let q = p.with_s0(k * s0).unwrap();
            let lhs = signal_isotropic(&q, b);
            let rhs = k * signal_isotropic(&p, b);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}
