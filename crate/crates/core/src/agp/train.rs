use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use super::io::{model_from_bytes, model_to_bytes, ModelFileError};
use super::mlp::MlpModel;
use super::AgpError;
use crate::params::{ParamPrior, N_PARAMS};
use crate::protocol::AcquisitionProtocol;
use crate::rng::{Domain, SeedStream};
use crate::simulate::sample_training_pair;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Loss-log period in iterations; each entry is the mean loss over the period.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    fn with(iterations: u64, batch_size: usize, checkpoint_interval: u64) -> Self {
        Self {
            iterations,
            batch_size,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_interval,
        }
    }

    pub fn smoke() -> Self {
        Self::with(1_000, 64, 50)
    }

    pub fn desk() -> Self {
        Self::with(200_000, 512, 1_000)
    }

    pub fn paper() -> Self {
        Self::with(1_000_000, 2_000, 5_000)
    }

    pub fn validate(&self) -> Result<(), AgpError> {
        let bad = |m: &str| Err(AgpError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(AgpError::InvalidConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be positive");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// `(iteration, mean loss over the preceding interval)`.
    pub log: Vec<(u64, f64)>,
}

pub fn loss_log_csv(log: &[(u64, f64)]) -> String {
    let mut s = String::from("iteration,mean_loss\n");
    for (it, l) in log {
        s.push_str(&format!("{it},{l:e}\n"));
    }
    s
}

/// Adam optimizer with per-weight moment estimates.
#[derive(Debug, Clone, PartialEq)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let lr = cfg.learning_rate;
        for k in 0..w.len() {
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            w[k] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Stateful training loop that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    prior: ParamPrior,
    protocol: AcquisitionProtocol,
    config: TrainConfig,
    model: MlpModel,
    adam: Adam,
    iteration: u64,
    window_sum: f64,
    window_count: u64,
    log: Vec<(u64, f64)>,
}

impl Trainer {
    pub fn new(prior: &ParamPrior, protocol: &AcquisitionProtocol, config: TrainConfig) -> Result<Self, AgpError> {
        config.validate()?;
        let mut rng = SeedStream::new(config.seed, Domain::Init).rng(0);
        let model = MlpModel::init(prior, protocol.n_b(), &mut rng);
        let n = model.weights().len();
        Ok(Self {
            prior: *prior,
            protocol: protocol.clone(),
            config,
            model,
            adam: Adam::new(n),
            iteration: 0,
            window_sum: 0.0,
            window_count: 0,
            log: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint. `config` may extend `iterations`;
    /// the seed and batch size must match the interrupted run.
    pub fn resume(
        prior: &ParamPrior,
        protocol: &AcquisitionProtocol,
        config: TrainConfig,
        ckpt: Checkpoint,
    ) -> Result<Self, CheckpointError> {
        config.validate().map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        if ckpt.seed != config.seed || ckpt.batch_size != config.batch_size as u64 {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has seed {} batch {}, config has seed {} batch {}",
                ckpt.seed, ckpt.batch_size, config.seed, config.batch_size
            )));
        }
        if ckpt.model.n_inputs() != protocol.n_b() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint model takes {} inputs, protocol has {} b-values",
                ckpt.model.n_inputs(),
                protocol.n_b()
            )));
        }
        Ok(Self {
            prior: *prior,
            protocol: protocol.clone(),
            config,
            model: ckpt.model,
            adam: Adam {
                m: ckpt.adam_m,
                v: ckpt.adam_v,
                t: ckpt.adam_t,
            },
            iteration: ckpt.iteration,
            window_sum: ckpt.window_sum,
            window_count: ckpt.window_count,
            log: ckpt.log,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn log(&self) -> &[(u64, f64)] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn batch(&self) -> (Array2<f64>, Array2<f64>) {
        let stream = SeedStream::new(self.config.seed, Domain::Train);
        let base = self.iteration << 32;
        let pairs: Vec<([f64; N_PARAMS], Vec<f64>)> = (0..self.config.batch_size as u64)
            .into_par_iter()
            .map(|i| {
                let (y, x) = sample_training_pair(&self.prior, &self.protocol, &mut stream.rng(base | i));
                (y.to_array(), x.into_inner())
            })
            .collect();
        let signals: Vec<&[f64]> = pairs.iter().map(|(_, x)| x.as_slice()).collect();
        let x = self.model.normalize_input(&signals).expect("protocol width");
        let ys: Vec<[f64; N_PARAMS]> = pairs.iter().map(|(y, _)| *y).collect();
        (x, self.model.normalize_targets(&ys))
    }

    /// One Adam step on a fresh simulator batch. Returns the batch loss.
    pub fn step(&mut self) -> Result<f64, AgpError> {
        let (x, t) = self.batch();
        let (loss, grad) = self.model.loss_and_gradient(x, &t);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AgpError::NonFiniteLoss {
                iteration: self.iteration,
                seed: self.config.seed,
                first_stream: self.iteration << 32,
            });
        }
        self.adam.step(self.model.weights_mut(), &grad, &self.config);
        self.iteration += 1;
        self.window_sum += loss;
        self.window_count += 1;
        if self.iteration.is_multiple_of(self.config.checkpoint_interval) || self.iteration == self.config.iterations {
            self.log.push((self.iteration, self.window_sum / self.window_count as f64));
            self.window_sum = 0.0;
            self.window_count = 0;
        }
        Ok(loss)
    }

    /// Runs until `config.iterations`, calling `on_log` whenever a log entry is appended.
    /// Returning `false` from the callback pauses the run.
    pub fn run_with(&mut self, mut on_log: impl FnMut(&Self) -> bool) -> Result<(), AgpError> {
        while !self.is_done() {
            let before = self.log.len();
            self.step()?;
            if self.log.len() != before && !on_log(self) {
                break;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), AgpError> {
        self.run_with(|_| true)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.config.seed,
            batch_size: self.config.batch_size as u64,
            iteration: self.iteration,
            adam_t: self.adam.t,
            window_sum: self.window_sum,
            window_count: self.window_count,
            model: self.model.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            log: self.log.clone(),
        }
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            log: self.log,
        }
    }
}

pub fn train(prior: &ParamPrior, protocol: &AcquisitionProtocol, config: &TrainConfig) -> Result<TrainOutcome, AgpError> {
    let mut t = Trainer::new(prior, protocol, *config)?;
    t.run()?;
    Ok(t.finish())
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint model: {0}")]
    Model(#[from] ModelFileError),
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
}

/// Full optimizer state, sufficient for a bit-exact resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub batch_size: u64,
    pub iteration: u64,
    pub adam_t: u64,
    pub window_sum: f64,
    pub window_count: u64,
    pub model: MlpModel,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub log: Vec<(u64, f64)>,
}

const CKPT_MAGIC: &[u8; 8] = b"IVIMCKP\0";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut o = Vec::new();
        o.extend_from_slice(CKPT_MAGIC);
        o.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for v in [self.seed, self.batch_size, self.iteration, self.adam_t] {
            o.extend_from_slice(&v.to_le_bytes());
        }
        o.extend_from_slice(&self.window_sum.to_le_bytes());
        o.extend_from_slice(&self.window_count.to_le_bytes());
        let model = model_to_bytes(&self.model);
        o.extend_from_slice(&(model.len() as u64).to_le_bytes());
        o.extend_from_slice(&model);
        for vec in [&self.adam_m, &self.adam_v] {
            o.extend_from_slice(&(vec.len() as u64).to_le_bytes());
            for x in vec.iter() {
                o.extend_from_slice(&x.to_le_bytes());
            }
        }
        o.extend_from_slice(&(self.log.len() as u64).to_le_bytes());
        for (it, l) in &self.log {
            o.extend_from_slice(&it.to_le_bytes());
            o.extend_from_slice(&l.to_le_bytes());
        }
        let crc = crc32fast::hash(&o);
        o.extend_from_slice(&crc.to_le_bytes());
        o
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = CkptReader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let batch_size = r.u64()?;
        let iteration = r.u64()?;
        let adam_t = r.u64()?;
        let window_sum = f64::from_bits(r.u64()?);
        let window_count = r.u64()?;
        let model_len = r.u64()? as usize;
        let model = model_from_bytes(r.take(model_len)?)?;
        let mut vecs = Vec::new();
        for _ in 0..2 {
            let n = r.u64()? as usize;
            if n != model.weights().len() {
                return Err(corrupt("moment length differs from weight count"));
            }
            vecs.push((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?);
        }
        let n_log = r.u64()? as usize;
        let mut log = Vec::with_capacity(n_log.min(1 << 20));
        for _ in 0..n_log {
            log.push((r.u64()?, f64::from_bits(r.u64()?)));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let adam_v = vecs.pop().unwrap();
        let adam_m = vecs.pop().unwrap();
        Ok(Self {
            seed,
            batch_size,
            iteration,
            adam_t,
            window_sum,
            window_count,
            model,
            adam_m,
            adam_v,
            log,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct CkptReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CkptReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
