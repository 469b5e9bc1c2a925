//! Rejection ABC: simulate `(y, x)` from the prior and acquisition model, keep
//! the proposals whose signals lie closest to the observation.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::agp::GaussianPosterior;
use crate::params::{IvimParams, ParamPrior, N_PARAMS, PARAM_NAMES, S0};
use crate::protocol::{AcquisitionProtocol, ProtocolError, SignalVector};
use crate::rng::{Domain, SeedStream};
use crate::simulate::simulate_signal;

pub const MIN_PROPOSALS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbcError {
    #[error("abc.n_proposals: {0} is below the minimum of {MIN_PROPOSALS}")]
    TooFewProposals(usize),
    #[error("abc.acceptance_quantile: {0} outside (0, 1]")]
    InvalidQuantile(f64),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbcDistance {
    /// Euclidean distance between signals divided by `scale`.
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbcConfig {
    pub n_proposals: usize,
    pub acceptance_quantile: f64,
    pub distance: AbcDistance,
    pub seed: u64,
    pub with_dephasing: bool,
}

impl Default for AbcConfig {
    fn default() -> Self {
        Self {
            n_proposals: 1_000_000,
            acceptance_quantile: 1e-3,
            distance: AbcDistance::Euclidean,
            seed: 0,
            with_dephasing: true,
        }
    }
}

impl AbcConfig {
    pub fn validate(&self) -> Result<(), AbcError> {
        if self.n_proposals < MIN_PROPOSALS {
            return Err(AbcError::TooFewProposals(self.n_proposals));
        }
        check_quantile(self.acceptance_quantile)
    }

    /// Number of accepted proposals, `round(q·n)` and at least one.
    pub fn n_accepted(&self) -> usize {
        accepted_count(self.n_proposals, self.acceptance_quantile)
    }
}

fn check_quantile(q: f64) -> Result<(), AbcError> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(AbcError::InvalidQuantile(q))
    }
}

fn accepted_count(n: usize, q: f64) -> usize {
    ((q * n as f64).round() as usize).clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub mean: [f64; N_PARAMS],
    /// Sample standard deviation (n − 1 denominator; zero for one sample).
    pub std: [f64; N_PARAMS],
}

impl PosteriorSummary {
    pub fn from_samples(samples: &[IvimParams]) -> Self {
        let n = samples.len() as f64;
        let mut mean = [0.0; N_PARAMS];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.to_array()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut ss = [0.0; N_PARAMS];
        for s in samples {
            for (j, v) in s.to_array().iter().enumerate() {
                ss[j] += (v - mean[j]).powi(2);
            }
        }
        let std = ss.map(|s| if samples.len() > 1 { (s / (n - 1.0)).sqrt() } else { 0.0 });
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    pub samples: Vec<IvimParams>,
    /// Distance of each accepted proposal, ascending.
    pub distances: Vec<f64>,
    pub summary: PosteriorSummary,
}

impl PosteriorSampleSet {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("s0,f,d,d_star,distance\n");
        for (p, d) in self.samples.iter().zip(&self.distances) {
            s.push_str(&format!("{:e},{:e},{:e},{:e},{d:e}\n", p.s0(), p.f(), p.d(), p.d_star()));
        }
        s
    }

    /// `key value` lines: per-parameter mean and std plus the sample count.
    pub fn summary_text(&self) -> String {
        let mut s = format!("n_accepted {}\n", self.samples.len());
        for (j, name) in PARAM_NAMES.iter().enumerate() {
            s.push_str(&format!("{name}_mean {:e}\n", self.summary.mean[j]));
            s.push_str(&format!("{name}_std {:e}\n", self.summary.std[j]));
        }
        s
    }
}

/// Simulated proposals kept in memory so that many observations can be
/// conditioned on the same draws.
#[derive(Debug, Clone)]
pub struct AbcReferenceTable {
    params: Vec<IvimParams>,
    /// Row-major `n × n_b`, already divided by the distance scale.
    signals: Vec<f64>,
    n_b: usize,
    scale: f64,
}

impl AbcReferenceTable {
    /// Proposal `i` uses stream `i` of `(config.seed, Abc)`.
    pub fn simulate(
        prior: &ParamPrior,
        protocol: &AcquisitionProtocol,
        config: &AbcConfig,
    ) -> Result<Self, AbcError> {
        config.validate()?;
        let stream = SeedStream::new(config.seed, Domain::Abc);
        let scale = prior.hi()[S0];
        let n_b = protocol.n_b();
        let rows: Vec<(IvimParams, Vec<f64>)> = (0..config.n_proposals as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.rng(i);
                let y = prior.sample(&mut rng);
                let x = simulate_signal(&y, protocol, config.with_dephasing, &mut rng);
                (y, x.into_inner())
            })
            .collect();
        let mut params = Vec::with_capacity(rows.len());
        let mut signals = Vec::with_capacity(rows.len() * n_b);
        for (y, x) in rows {
            params.push(y);
            signals.extend(x.iter().map(|v| v / scale));
        }
        Ok(Self {
            params,
            signals,
            n_b,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn query(&self, observed: &SignalVector, quantile: f64) -> Result<PosteriorSampleSet, AbcError> {
        check_quantile(quantile)?;
        if observed.len() != self.n_b {
            return Err(ProtocolError::LengthMismatch {
                field: "signal",
                expected: self.n_b,
                found: observed.len(),
            }
            .into());
        }
        let obs: Vec<f64> = observed.values().iter().map(|v| v / self.scale).collect();
        let mut scored: Vec<(f64, u32)> = self
            .signals
            .par_chunks(self.n_b)
            .enumerate()
            .map(|(i, x)| {
                let d2: f64 = x.iter().zip(&obs).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i as u32)
            })
            .collect();
        let k = accepted_count(scored.len(), quantile);
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        let samples: Vec<IvimParams> = scored.iter().map(|&(_, i)| self.params[i as usize]).collect();
        Ok(PosteriorSampleSet {
            summary: PosteriorSummary::from_samples(&samples),
            distances: scored.iter().map(|&(d2, _)| d2.sqrt()).collect(),
            samples,
        })
    }
}

/// Rejection posterior for a single observation.
pub fn abc_posterior(
    observed: &SignalVector,
    prior: &ParamPrior,
    protocol: &AcquisitionProtocol,
    config: &AbcConfig,
) -> Result<PosteriorSampleSet, AbcError> {
    protocol.check_signal(observed)?;
    AbcReferenceTable::simulate(prior, protocol, config)?.query(observed, config.acceptance_quantile)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorComparison {
    /// `|μ_ABC − μ_AGP| / σ_ABC`.
    pub mean_shift: [f64; N_PARAMS],
    /// `σ_AGP / σ_ABC`.
    pub std_ratio: [f64; N_PARAMS],
    /// Overlap of the ABC sample histogram with the AGP Gaussian, in [0, 1].
    pub overlap: [f64; N_PARAMS],
}

pub fn compare_posteriors(abc: &PosteriorSampleSet, agp: &GaussianPosterior) -> PosteriorComparison {
    let s = &abc.summary;
    let mut out = PosteriorComparison {
        mean_shift: [0.0; N_PARAMS],
        std_ratio: [0.0; N_PARAMS],
        overlap: [0.0; N_PARAMS],
    };
    for j in 0..N_PARAMS {
        out.mean_shift[j] = (s.mean[j] - agp.mean[j]).abs() / s.std[j];
        out.std_ratio[j] = agp.std[j] / s.std[j];
        let xs: Vec<f64> = abc.samples.iter().map(|p| p.to_array()[j]).collect();
        out.overlap[j] = histogram_gaussian_overlap(&xs, agp.mean[j], agp.std[j]);
    }
    out
}

/// `Σ_bins min(p_hist, p_gauss)` over a common binning that covers the samples
/// and `μ ± 5σ`.
pub fn histogram_gaussian_overlap(xs: &[f64], mu: f64, sigma: f64) -> f64 {
    if xs.is_empty() || !(sigma > 0.0) {
        return 0.0;
    }
    let normal = Normal::new(mu, sigma).expect("positive sigma");
    let (smin, smax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let lo = smin.min(mu - 5.0 * sigma);
    let hi = smax.max(mu + 5.0 * sigma);
    let n_bins = ((xs.len() as f64).sqrt() as usize).clamp(10, 100);
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &x in xs {
        let b = (((x - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let n = xs.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let a = lo + b as f64 * width;
            let q = normal.cdf(a + width) - normal.cdf(a);
            (c as f64 / n).min(q)
        })
        .sum()
}
