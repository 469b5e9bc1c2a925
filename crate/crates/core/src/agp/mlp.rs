use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::loss::{GaussianNll, LOG_STD_CLAMP};
use super::{AgpError, GaussianPosterior};
use crate::params::{ParamPrior, N_PARAMS, S0};

pub const HIDDEN_LAYERS: usize = 5;
pub const HIDDEN_WIDTH: usize = 50;
pub const OUTPUT_WIDTH: usize = 2 * N_PARAMS;

/// Per-channel affine input map `x ↦ x·scale + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl InputNorm {
    /// Every channel divided by the prior's maximum S0.
    pub fn from_prior(prior: &ParamPrior, n_in: usize) -> Self {
        Self {
            scale: vec![1.0 / prior.hi()[S0]; n_in],
            offset: vec![0.0; n_in],
        }
    }
}

/// Maps normalized outputs to physical units: `p = lo + (hi - lo)·u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputNorm {
    pub lo: [f64; N_PARAMS],
    pub hi: [f64; N_PARAMS],
}

impl OutputNorm {
    pub fn from_prior(prior: &ParamPrior) -> Self {
        Self {
            lo: prior.lo(),
            hi: prior.hi(),
        }
    }

    pub fn width(&self, j: usize) -> f64 {
        self.hi[j] - self.lo[j]
    }

    pub fn normalize(&self, y: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
        std::array::from_fn(|j| (y[j] - self.lo[j]) / self.width(j))
    }

    pub fn denormalize(&self, u: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
        std::array::from_fn(|j| self.lo[j] + self.width(j) * u[j])
    }
}

/// Fully connected tanh network `n_in → 50 ×5 → 8` with linear output.
///
/// Weights live in one flat buffer, layer by layer: the `in × out` matrix
/// (row-major) followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    weights: Vec<f64>,
    input_norm: InputNorm,
    output_norm: OutputNorm,
}

/// Gradient buffer with the same layout as [`MlpModel::weights`].
pub type Gradients = Vec<f64>;

pub(crate) fn standard_sizes(n_in: usize) -> Vec<usize> {
    let mut s = vec![n_in];
    s.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
    s.push(OUTPUT_WIDTH);
    s
}

fn n_weights(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpModel {
    /// All-zero weights.
    pub fn zeros(n_in: usize, input_norm: InputNorm, output_norm: OutputNorm) -> Self {
        Self::with_sizes(standard_sizes(n_in), input_norm, output_norm)
    }

    pub(crate) fn with_sizes(sizes: Vec<usize>, input_norm: InputNorm, output_norm: OutputNorm) -> Self {
        assert_eq!(input_norm.scale.len(), sizes[0]);
        assert_eq!(input_norm.offset.len(), sizes[0]);
        let n = n_weights(&sizes);
        Self {
            sizes,
            weights: vec![0.0; n],
            input_norm,
            output_norm,
        }
    }

    pub(crate) fn from_parts(
        sizes: Vec<usize>,
        weights: Vec<f64>,
        input_norm: InputNorm,
        output_norm: OutputNorm,
    ) -> Self {
        assert_eq!(weights.len(), n_weights(&sizes));
        Self {
            sizes,
            weights,
            input_norm,
            output_norm,
        }
    }

    /// Glorot-uniform weights `U(±√(6/(fan_in+fan_out)))`, zero biases.
    pub fn init<R: Rng + ?Sized>(prior: &ParamPrior, n_in: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_in, InputNorm::from_prior(prior, n_in), OutputNorm::from_prior(prior));
        let mut off = 0;
        for l in 0..m.n_layers() {
            let (fi, fo) = (m.sizes[l], m.sizes[l + 1]);
            let a = (6.0 / (fi + fo) as f64).sqrt();
            for w in &mut m.weights[off..off + fi * fo] {
                *w = rng.random_range(-a..a);
            }
            off += fi * fo + fo;
        }
        m
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &OutputNorm {
        &self.output_norm
    }

    /// `(weight_offset, bias_offset)` of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (wo, bo) = self.layer_offsets(l);
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((fi, fo), &self.weights[wo..bo]).expect("layer shape");
        let b = ArrayView1::from(&self.weights[bo..bo + fo]);
        (w, b)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Normalized batch input, one row per signal.
    pub fn normalize_input(&self, signals: &[&[f64]]) -> Result<Array2<f64>, AgpError> {
        let n_in = self.n_inputs();
        let mut x = Array2::zeros((signals.len(), n_in));
        for (mut row, s) in x.outer_iter_mut().zip(signals) {
            if s.len() != n_in {
                return Err(AgpError::DimensionMismatch {
                    expected: n_in,
                    found: s.len(),
                });
            }
            for c in 0..n_in {
                row[c] = s[c] * self.input_norm.scale[c] + self.input_norm.offset[c];
            }
        }
        Ok(x)
    }

    /// Raw outputs `[μ; λ_raw]` for a normalized batch, keeping hidden activations.
    fn forward_cached(&self, x: Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts = Vec::with_capacity(self.n_layers());
        let mut a = x;
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = a.dot(&w);
            z += &b;
            acts.push(a);
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        (acts, a)
    }

    pub fn forward_raw(&self, x: Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).1
    }

    /// Mean batch loss and its exact gradient w.r.t. all weights.
    /// `targets` are normalized parameter vectors, one row per sample.
    pub fn loss_and_gradient(&self, x: Array2<f64>, targets: &Array2<f64>) -> (f64, Gradients) {
        let batch = x.nrows();
        let (acts, out) = self.forward_cached(x);
        let mut d = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        let inv_b = 1.0 / batch as f64;
        for ((o, t), mut drow) in out.outer_iter().zip(targets.outer_iter()).zip(d.outer_iter_mut()) {
            let e = GaussianNll::evaluate(o.as_slice().unwrap(), t.as_slice().unwrap());
            loss += e.loss;
            for (k, v) in e.d_out.iter().enumerate() {
                drow[k] = v * inv_b;
            }
        }
        loss *= inv_b;

        let mut grad = vec![0.0; self.weights.len()];
        for l in (0..self.n_layers()).rev() {
            let (wo, bo) = self.layer_offsets(l);
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            {
                let (gw, gb) = grad[wo..bo + fo].split_at_mut(fi * fo);
                let mut gw = ArrayViewMut2::from_shape((fi, fo), gw).unwrap();
                general_mat_mul(1.0, &acts[l].t(), &d, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(d.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut da = d.dot(&w.t());
                // d tanh = 1 - a² on the previous layer's activations
                da.zip_mut_with(&acts[l], |g, &a| *g *= 1.0 - a * a);
                d = da;
            }
        }
        (loss, grad)
    }

    /// Posterior for each signal in a batch.
    pub fn forward_batch(&self, signals: &[&[f64]]) -> Result<Vec<GaussianPosterior>, AgpError> {
        let x = self.normalize_input(signals)?;
        let out = self.forward_raw(x);
        Ok(out.outer_iter().map(|o| self.posterior_from_raw(o.as_slice().unwrap())).collect())
    }

    pub fn forward(&self, signal: &[f64]) -> Result<GaussianPosterior, AgpError> {
        Ok(self.forward_batch(&[signal])?.remove(0))
    }

    fn posterior_from_raw(&self, o: &[f64]) -> GaussianPosterior {
        let mu: [f64; N_PARAMS] = std::array::from_fn(|j| o[j]);
        let lam: [f64; N_PARAMS] = std::array::from_fn(|j| o[N_PARAMS + j].clamp(-LOG_STD_CLAMP, LOG_STD_CLAMP));
        let norm = &self.output_norm;
        GaussianPosterior {
            mean: norm.denormalize(&mu),
            std: std::array::from_fn(|j| norm.width(j) * lam[j].exp()),
            mean_normalized: mu,
            log_std_normalized: lam,
        }
    }

    /// Normalized targets for a batch of physical parameter vectors.
    pub fn normalize_targets(&self, ys: &[[f64; N_PARAMS]]) -> Array2<f64> {
        let mut t = Array2::zeros((ys.len(), N_PARAMS));
        for (mut row, y) in t.outer_iter_mut().zip(ys) {
            let u = self.output_norm.normalize(y);
            row.assign(&ArrayView1::from(&u[..]));
        }
        t
    }
}
