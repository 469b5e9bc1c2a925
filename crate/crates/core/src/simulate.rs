//! Implicit acquisition model: Rician magnitudes per gradient, Bernoulli-gated
//! uniform dephasing attenuation per b-value, averaged over gradients.
//!
//! Draw order per b-value is fixed (gate uniform, attenuation uniform, then two
//! normals per gradient) regardless of flags or outcomes, so seeded replays of
//! the isotropic and tensor variants stay in lockstep.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{signal_anisotropic_unchecked, signal_isotropic};
use crate::params::{IvimParams, ParamPrior};
use crate::protocol::{AcquisitionProtocol, SignalVector};
use crate::tensor::DiffusionTensorPair;

/// Magnitude of a complex Gaussian with mean `amplitude` and per-channel
/// standard deviation `sigma`.
#[inline]
pub fn sample_rician<R: Rng + ?Sized>(amplitude: f64, sigma: f64, rng: &mut R) -> f64 {
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    let re = amplitude + sigma * n1;
    let im = sigma * n2;
    (re * re + im * im).sqrt()
}

/// Dephasing multiplier for one b-value: `alpha^gamma`, with both uniforms
/// always consumed.
#[inline]
fn dephase_factor<R: Rng + ?Sized>(prob: f64, with_dephasing: bool, rng: &mut R) -> f64 {
    let gate: f64 = rng.random();
    let alpha: f64 = rng.random();
    if with_dephasing && gate < prob {
        alpha
    } else {
        1.0
    }
}

fn acquire<R, C>(
    protocol: &AcquisitionProtocol,
    with_dephasing: bool,
    rng: &mut R,
    mut clean: C,
    mut record: Option<&mut Vec<f64>>,
) -> SignalVector
where
    R: Rng + ?Sized,
    C: FnMut(usize, usize) -> f64,
{
    let n_g = protocol.n_g();
    let sigmas = protocol.noise_sigmas();
    let mut out = Vec::with_capacity(protocol.n_b());
    for (i, &prob) in protocol.dephase_probs().iter().enumerate() {
        let att = dephase_factor(prob, with_dephasing, rng);
        let mut acc = 0.0;
        for (j, &sigma) in sigmas.iter().enumerate() {
            let amp = clean(i, j) * att;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(amp);
            }
            acc += sample_rician(amp, sigma, rng);
        }
        out.push(acc / n_g as f64);
    }
    SignalVector::from_raw(out)
}

/// One noisy trace signal from the isotropic model.
pub fn simulate_signal<R: Rng + ?Sized>(
    params: &IvimParams,
    protocol: &AcquisitionProtocol,
    with_dephasing: bool,
    rng: &mut R,
) -> SignalVector {
    let clean: Vec<f64> = protocol
        .b_values()
        .iter()
        .map(|&b| signal_isotropic(params, b))
        .collect();
    acquire(protocol, with_dephasing, rng, |i, _| clean[i], None)
}

/// One noisy trace signal where each gradient sees its own apparent diffusivities.
///
/// Gradient directions are validated unit vectors by protocol construction.
pub fn simulate_signal_anisotropic<R: Rng + ?Sized>(
    tensors: &DiffusionTensorPair,
    s0: f64,
    protocol: &AcquisitionProtocol,
    with_dephasing: bool,
    rng: &mut R,
) -> SignalVector {
    let b = protocol.b_values();
    let g = protocol.gradient_dirs();
    acquire(
        protocol,
        with_dephasing,
        rng,
        |i, j| signal_anisotropic_unchecked(tensors, s0, b[i], &g[j]),
        None,
    )
}

/// Joint draw `y ~ p(y)`, `x ~ p(x | y)` with dephasing enabled.
pub fn sample_training_pair<R: Rng + ?Sized>(
    prior: &ParamPrior,
    protocol: &AcquisitionProtocol,
    rng: &mut R,
) -> (IvimParams, SignalVector) {
    let y = prior.sample(rng);
    let x = simulate_signal(&y, protocol, true, rng);
    (y, x)
}

#[cfg(test)]
pub(crate) fn simulate_recording<R: Rng + ?Sized>(
    params: &IvimParams,
    protocol: &AcquisitionProtocol,
    with_dephasing: bool,
    rng: &mut R,
) -> (SignalVector, Vec<f64>) {
    let clean: Vec<f64> = protocol
        .b_values()
        .iter()
        .map(|&b| signal_isotropic(params, b))
        .collect();
    let mut rec = Vec::new();
    let s = acquire(protocol, with_dephasing, rng, |i, _| clean[i], Some(&mut rec));
    (s, rec)
}
