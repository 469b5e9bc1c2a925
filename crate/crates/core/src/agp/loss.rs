use crate::params::N_PARAMS;

/// Normalized-space log-std is clamped to `[-LOG_STD_CLAMP, LOG_STD_CLAMP]`.
pub const LOG_STD_CLAMP: f64 = 10.0;

/// Per-sample Gaussian NLL without the constant: `Σ_j λ_j + (y_j - μ_j)² / (2 e^{2λ_j})`.
pub fn gaussian_nll_loss(mu: &[f64; N_PARAMS], log_std: &[f64; N_PARAMS], target: &[f64; N_PARAMS]) -> f64 {
    (0..N_PARAMS)
        .map(|j| {
            let r = target[j] - mu[j];
            log_std[j] + 0.5 * r * r * (-2.0 * log_std[j]).exp()
        })
        .sum()
}

/// Loss and output-layer gradient for one sample given raw network outputs
/// `[μ; λ_raw]`. λ is clamped; the clamp passes zero gradient outside its range.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNll {
    pub loss: f64,
    pub d_out: [f64; 2 * N_PARAMS],
}

impl GaussianNll {
    pub fn evaluate(out: &[f64], target: &[f64]) -> Self {
        let mut d_out = [0.0; 2 * N_PARAMS];
        let mut loss = 0.0;
        for j in 0..N_PARAMS {
            let mu = out[j];
            let raw = out[N_PARAMS + j];
            let lam = raw.clamp(-LOG_STD_CLAMP, LOG_STD_CLAMP);
            let r = target[j] - mu;
            let inv_var = (-2.0 * lam).exp();
            loss += lam + 0.5 * r * r * inv_var;
            d_out[j] = -r * inv_var;
            d_out[N_PARAMS + j] = if raw.abs() <= LOG_STD_CLAMP {
                1.0 - r * r * inv_var
            } else {
                0.0
            };
        }
        Self { loss, d_out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_prediction_unit_variance() {
        let y = [0.3, 0.1, 0.7, 0.2];
        assert_eq!(gaussian_nll_loss(&y, &[0.0; 4], &y), 0.0);
        assert_eq!(gaussian_nll_loss(&y, &[1.0; 4], &y), 4.0);
    }

    #[test]
    fn numeric_minimizer_over_log_std() {
        // For residual r, d/dλ [λ + r²e^{-2λ}/2] = 0 at λ* = ½ log r². With r = 1, λ* = 0.
        let f = |lam: f64| gaussian_nll_loss(&[0.0; 4], &[lam; 4], &[1.0; 4]) / 4.0;
        // golden-section search on [-3, 3]
        let (mut a, mut b) = (-3.0f64, 3.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let lam = 0.5 * (a + b);
        assert!(lam.abs() < 1e-6, "{lam}");
        // value at the optimum equals the analytic bound ½(1 + log r²) = ½
        assert!((f(lam) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn clamp_zeroes_log_std_gradient() {
        let out = [0.0, 0.0, 0.0, 0.0, 12.0, -11.0, 9.0, 0.0];
        let e = GaussianNll::evaluate(&out, &[0.5; 4]);
        assert_eq!(e.d_out[4], 0.0);
        assert_eq!(e.d_out[5], 0.0);
        assert!(e.d_out[6] != 0.0);
        assert!(e.loss.is_finite());
    }
}
