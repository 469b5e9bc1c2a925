use rayon::prelude::*;

use super::{check_model, EvalError};
use crate::agp::MlpModel;
use crate::lsq::{fit_lsq, LsqConfig};
use crate::params::{D, D_STAR, F, N_PARAMS};
use crate::protocol::AcquisitionProtocol;
use crate::rng::{Domain, SeedStream};
use crate::simulate::simulate_signal_anisotropic;
use crate::tensor::{prolate_tensor_from_mean_adc_fa, random_rotation, DiffusionTensorPair};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkConfig {
    pub n_cases: usize,
    pub with_dephasing: bool,
    pub s0: f64,
    pub f: f64,
    /// Directional-average diffusivity of the D tensor (`tr/3`).
    pub mean_d: f64,
    pub mean_d_star: f64,
    pub fa: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_cases: 1024,
            with_dephasing: true,
            s0: 1000.0,
            f: 0.18,
            mean_d: 9.4e-4,
            mean_d_star: 5.3e-2,
            fa: 0.8,
            seed: 0,
        }
    }
}

/// MAE in reporting units: f in percentage points, D in 1e-4 mm²/s, D* in 1e-3 mm²/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodMae {
    pub f: f64,
    pub d: f64,
    pub d_star: f64,
}

impl MethodMae {
    pub const UNITS: [(&'static str, f64); 3] = [("%", 1e-2), ("1e-4 mm2/s", 1e-4), ("1e-3 mm2/s", 1e-3)];

    fn from_errors(abs_err: &[[f64; N_PARAMS]]) -> Self {
        let n = abs_err.len() as f64;
        let mean = |j: usize| abs_err.iter().map(|e| e[j]).sum::<f64>() / n;
        Self {
            f: mean(F) / Self::UNITS[0].1,
            d: mean(D) / Self::UNITS[1].1,
            d_star: mean(D_STAR) / Self::UNITS[2].1,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.f, self.d, self.d_star]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkCase {
    /// `[S0, f, tr(D)/3, tr(D*)/3]`.
    pub truth: [f64; N_PARAMS],
    pub agp: [f64; N_PARAMS],
    /// `None` when the LSQ fit failed.
    pub lsq: Option<[f64; N_PARAMS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub protocol_fingerprint: u32,
    pub agp: MethodMae,
    /// Over the cases where LSQ returned a fit.
    pub lsq: MethodMae,
    pub lsq_failures: usize,
    pub cases: Vec<BenchmarkCase>,
}

impl BenchmarkReport {
    pub fn cases_csv(&self) -> String {
        let mut s = String::from(
            "case,s0,f,d,d_star,agp_s0,agp_f,agp_d,agp_d_star,lsq_s0,lsq_f,lsq_d,lsq_d_star\n",
        );
        for (i, c) in self.cases.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in c.truth.iter().chain(&c.agp) {
                s.push_str(&format!(",{v:e}"));
            }
            match c.lsq {
                Some(l) => l.iter().for_each(|v| s.push_str(&format!(",{v:e}"))),
                None => s.push_str(",nan,nan,nan,nan"),
            }
            s.push('\n');
        }
        s
    }
}

/// Case `i` draws its rotation and acquisition noise from stream `i` of
/// `(seed, Benchmark)`, so runs with and without dephasing see the same
/// rotations and the same Gaussian noise.
pub fn anisotropic_benchmark(
    model: &MlpModel,
    lsq_config: &LsqConfig,
    protocol: &AcquisitionProtocol,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport, EvalError> {
    if config.n_cases < 1 {
        return Err(EvalError::InvalidSpec("n_cases must be >= 1".into()));
    }
    check_model(model, protocol)?;
    lsq_config.validate_for(protocol)?;
    let stream = SeedStream::new(config.seed, Domain::Benchmark);
    let truth = [config.s0, config.f, config.mean_d, config.mean_d_star];
    let cases: Vec<Result<BenchmarkCase, EvalError>> = (0..config.n_cases as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.rng(i);
            let rot = random_rotation(&mut rng);
            let dt = prolate_tensor_from_mean_adc_fa(config.mean_d, config.fa, &rot)
                .map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
            let dst = prolate_tensor_from_mean_adc_fa(config.mean_d_star, config.fa, &rot)
                .map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
            let pair = DiffusionTensorPair::new(dt, dst, config.f).map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
            let x = simulate_signal_anisotropic(&pair, config.s0, protocol, config.with_dephasing, &mut rng);
            let agp = model.forward(x.values())?.mean;
            let lsq = fit_lsq(&x, protocol, lsq_config).ok().map(|r| r.params.to_array());
            Ok(BenchmarkCase { truth, agp, lsq })
        })
        .collect();
    let cases = cases.into_iter().collect::<Result<Vec<_>, _>>()?;

    let abs_err = |est: &[f64; N_PARAMS], t: &[f64; N_PARAMS]| -> [f64; N_PARAMS] { std::array::from_fn(|j| (est[j] - t[j]).abs()) };
    let agp_err: Vec<_> = cases.iter().map(|c| abs_err(&c.agp, &c.truth)).collect();
    let lsq_err: Vec<_> = cases.iter().filter_map(|c| c.lsq.map(|l| abs_err(&l, &c.truth))).collect();
    let lsq_mae = if lsq_err.is_empty() {
        MethodMae {
            f: f64::NAN,
            d: f64::NAN,
            d_star: f64::NAN,
        }
    } else {
        MethodMae::from_errors(&lsq_err)
    };
    Ok(BenchmarkReport {
        config: *config,
        protocol_fingerprint: protocol.fingerprint(),
        agp: MethodMae::from_errors(&agp_err),
        lsq: lsq_mae,
        lsq_failures: cases.len() - lsq_err.len(),
        cases,
    })
}
