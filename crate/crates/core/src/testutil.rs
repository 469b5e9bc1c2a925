//! Independent numerical oracles for unit tests.

/// Exponentially scaled modified Bessel function `e^{-x} I0(x)`, x >= 0.
/// Power series below 15, asymptotic expansion above.
pub fn bessel_i0e(x: f64) -> f64 {
    if x < 15.0 {
        let q = x * x / 4.0;
        let (mut term, mut sum) = (1.0, 1.0);
        for k in 1..200 {
            term *= q / (k as f64 * k as f64);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum * (-x).exp()
    } else {
        asymptotic(0.0, x)
    }
}

/// `e^{-x} I1(x)`, x >= 0.
pub fn bessel_i1e(x: f64) -> f64 {
    if x < 15.0 {
        let q = x * x / 4.0;
        let mut term = x / 2.0;
        let mut sum = term;
        for k in 1..200 {
            term *= q / (k as f64 * (k + 1) as f64);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum * (-x).exp()
    } else {
        asymptotic(1.0, x)
    }
}

fn asymptotic(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..30 {
        let kf = k as f64;
        term *= -(mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * x);
        sum += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    sum / (2.0 * std::f64::consts::PI * x).sqrt()
}

/// First moment of Rice(amplitude, sigma) via the Laguerre function
/// `L_{1/2}(-z) = e^{-z/2} [(1+z) I0(z/2) + z I1(z/2)]`, `z = A²/2σ²`.
pub fn rician_mean(amplitude: f64, sigma: f64) -> f64 {
    let z = amplitude * amplitude / (2.0 * sigma * sigma);
    let h = z / 2.0;
    sigma * (std::f64::consts::PI / 2.0).sqrt() * ((1.0 + z) * bessel_i0e(h) + z * bessel_i1e(h))
}

#[test]
fn bessel_reference_values() {
    // scipy.special.i0e / i1e
    assert!((bessel_i0e(1.0) - 0.465_759_607_593_640_4).abs() < 1e-14);
    assert!((bessel_i1e(1.0) - 0.207_910_415_349_708_5).abs() < 1e-14);
    assert!((bessel_i0e(20.0) - 0.089_780_311_884_826).abs() < 1e-12);
    assert!((bessel_i1e(20.0) - 0.087_506_222_183_288_7).abs() < 1e-12);
}
