//! Data ingestion, SGD with momentum, training loops, evaluation and checkpoints.

use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{settle, NetProblem, NudgePath, SettleConfig};
use crate::estimators::{classic_ep, hep_estimate, online_estimate, EstimatorError, OnlineConfig, PhaseConfig};
use crate::model::{ModelError, Network, NetworkSpec, ParamSet, Params};
use crate::oracle::unrolled_adjoint_gradient;
use crate::tensor::{RealTensor, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:#010x} at offset {offset}, expected {expected:#010x}")]
    BadMagic { path: String, offset: usize, found: u32, expected: u32 },
    #[error("{path}: truncated, need {needed} bytes but found {found}")]
    Truncated { path: String, needed: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { path: path.to_string(), needed: offset + 4, found: bytes.len() })
}

/// Parses an IDX file, returning the dimension list and the byte payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &str) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(DataError::BadMagic { path: path.to_string(), offset: 0, found: magic, expected: expected_magic });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let start = 4 + 4 * rank;
    let needed = start + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(DataError::Truncated { path: path.to_string(), needed, found: bytes.len() });
    }
    Ok((dims, bytes[start..needed].to_vec()))
}

/// Images stored sample-major, each a flat `sample_shape` block of values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, images: Vec<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self, DataError> {
        let dim: usize = sample_shape.iter().product();
        if dim == 0 || images.len() != dim * labels.len() {
            return Err(DataError::CountMismatch { images: images.len() / dim.max(1), labels: labels.len() });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(Self { sample_shape, images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.images[i * d..(i + 1) * d]
    }

    /// Samples `idx` as a `[sample_shape..., B]` tensor and their labels.
    pub fn batch(&self, idx: &[usize]) -> (RealTensor, Vec<usize>) {
        let d = self.dim();
        let b = idx.len();
        let mut data = vec![0.0; d * b];
        for (j, &i) in idx.iter().enumerate() {
            for (k, &v) in self.sample(i).iter().enumerate() {
                data[k * b + j] = v;
            }
        }
        let mut shape = self.sample_shape.clone();
        shape.push(b);
        (Tensor::from_vec(&shape, data).expect("consistent batch"), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let d = self.dim();
        Self {
            sample_shape: self.sample_shape.clone(),
            images: self.images[range.start * d..range.end * d].to_vec(),
            labels: self.labels[range].to_vec(),
            n_classes: self.n_classes,
        }
    }

    /// Holds out the last `n_val` samples.
    pub fn split(&self, n_val: usize) -> (Self, Self) {
        let cut = self.len().saturating_sub(n_val);
        (self.subset(0..cut), self.subset(cut..self.len()))
    }
}

/// Reads `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` from `dir`, flattening
/// images and scaling pixels by 1/255.
pub fn load_mnist(dir: &Path) -> Result<Dataset, DataError> {
    // Plain IDX if present, else the gzipped file.
    let read = |name: &str| -> Result<(Vec<u8>, String), DataError> {
        let plain = dir.join(name);
        let mut buf = Vec::new();
        if plain.exists() {
            std::fs::File::open(&plain)?.read_to_end(&mut buf)?;
            return Ok((buf, plain.display().to_string()));
        }
        let gz = dir.join(format!("{name}.gz"));
        flate2::read::GzDecoder::new(std::fs::File::open(&gz)?).read_to_end(&mut buf)?;
        Ok((buf, gz.display().to_string()))
    };
    let (img, ip) = read("train-images-idx3-ubyte")?;
    let (lab, lp) = read("train-labels-idx1-ubyte")?;
    let (idims, pixels) = parse_idx(&img, IDX_IMAGES_MAGIC, &ip)?;
    let (ldims, labels) = parse_idx(&lab, IDX_LABELS_MAGIC, &lp)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    let dim = idims[1..].iter().product();
    Dataset::new(vec![dim], pixels.iter().map(|&p| p as f64 / 255.0).collect(), labels.iter().map(|&l| l as usize).collect(), 10)
}

/// Gaussian inputs of shape `sample_shape` with uniformly random labels.
pub fn synth_dataset(n: usize, sample_shape: &[usize], classes: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || classes == 0 {
        return Err(DataError::Invalid("synthetic dataset needs n >= 1 and classes >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim: usize = sample_shape.iter().product();
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        images.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        labels.push(rand::Rng::random_range(&mut rng, 0..classes));
    }
    Dataset::new(sample_shape.to_vec(), images, labels, classes)
}

/// A scalar shared by all layers or one value per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLayer {
    Global(f64),
    Layers(Vec<f64>),
}

impl PerLayer {
    pub fn get(&self, layer: usize) -> f64 {
        match self {
            PerLayer::Global(v) => *v,
            PerLayer::Layers(v) => v[layer],
        }
    }

    fn check(&self, name: &str, depth: usize, positive: bool) -> Result<(), String> {
        let vals: Vec<f64> = match self {
            PerLayer::Global(v) => vec![*v],
            PerLayer::Layers(v) if v.len() == depth => v.clone(),
            PerLayer::Layers(v) => return Err(format!("{name} has {} entries for {depth} layers", v.len())),
        };
        let ok = |v: f64| if positive { v > 0.0 } else { v >= 0.0 };
        match vals.into_iter().find(|&v| !(v.is_finite() && ok(v))) {
            Some(v) => Err(format!("bad {name} value {v}")),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing without restart, reaching `final_fraction` of the initial rate at the last epoch.
    Cosine { final_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum TrainEstimator {
    ClassicEp { beta: f64, #[serde(default)] realizations: Option<usize> },
    Holomorphic { radius: f64, n_points: usize },
    Online(OnlineConfig),
    /// Backpropagation through the free phase; a reference trainer.
    Adjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: PerLayer,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "zero_decay")]
    pub weight_decay: PerLayer,
    pub epochs: usize,
    #[serde(default = "constant")]
    pub schedule: LrSchedule,
    pub estimator: TrainEstimator,
    #[serde(default)]
    pub phases: PhaseConfig,
    /// Steps of the free settle used for evaluation.
    #[serde(default = "eval_steps")]
    pub eval_steps: usize,
    #[serde(default = "init_gain")]
    pub init_gain: f64,
    #[serde(default)]
    pub seed: u64,
}

fn zero_decay() -> PerLayer {
    PerLayer::Global(0.0)
}
fn constant() -> LrSchedule {
    LrSchedule::Constant
}
fn eval_steps() -> usize {
    200
}
fn init_gain() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self, depth: usize) -> Result<(), String> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err("batch_size and epochs must be >= 1".into());
        }
        self.learning_rate.check("learning_rate", depth, true)?;
        self.weight_decay.check("weight_decay", depth, false)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        match &self.estimator {
            TrainEstimator::ClassicEp { beta, .. } if *beta == 0.0 => Err("classic EP needs beta != 0".into()),
            TrainEstimator::Holomorphic { radius, n_points } => {
                NudgePath::new(*radius, *n_points).map_err(|e| e.to_string())?;
                if *radius == 0.0 {
                    return Err("hEP radius must be positive".into());
                }
                Ok(())
            }
            TrainEstimator::Online(o) => o.validate().map_err(|e| e.to_string()),
            _ => Ok(()),
        }
    }

    /// Rate of `layer` at `epoch` (0-based).
    pub fn lr(&self, layer: usize, epoch: usize) -> f64 {
        let base = self.learning_rate.get(layer);
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_fraction } => {
                let last = base * final_fraction;
                let t = if self.epochs > 1 { epoch as f64 / (self.epochs - 1) as f64 } else { 0.0 };
                last + 0.5 * (base - last) * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// Momentum buffers and learning state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub velocity: Params,
}

impl Optimizer {
    pub fn new(params: &Params) -> Self {
        Self { velocity: ParamSet::zeros_like(params) }
    }

    /// `v <- m v + g + wd theta`, then `theta <- theta - lr(epoch) v`, per layer.
    pub fn step(&mut self, params: &mut Params, grad: &Params, cfg: &TrainConfig, epoch: usize) {
        let m = cfg.momentum;
        for (l, ((p, v), g)) in params.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grad.layers).enumerate() {
            let wd = cfg.weight_decay.get(l);
            let lr = cfg.lr(l, epoch);
            for (pt, vt, gt) in [(&mut p.weight, &mut v.weight, &g.weight), (&mut p.bias, &mut v.bias, &g.bias)] {
                for ((th, vel), gr) in pt.data_mut().iter_mut().zip(vt.data_mut()).zip(gt.data()) {
                    *vel = m * *vel + gr + wd * *th;
                    *th -= lr * *vel;
                }
            }
        }
    }
}

pub fn sgd_step(params: &mut Params, opt: &mut Optimizer, grad: &Params, cfg: &TrainConfig, epoch: usize) {
    opt.step(params, grad, cfg, epoch)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("divergence at epoch {epoch}, minibatch {batch}: {source}")]
    Diverged { epoch: usize, batch: usize, source: EstimatorError, checkpoint: Box<Checkpoint> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_err: f64,
    pub val_err: f64,
    pub mean_imag_residual: f64,
    pub wall_seconds: f64,
}

pub const EVAL_CHUNK: usize = 500;

/// Fraction of samples whose free-phase readout arg-max differs from the label.
pub fn evaluate(net: &Network, params: &Params, data: &Dataset, steps: usize) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let chunks: Vec<usize> = (0..data.len()).step_by(EVAL_CHUNK).collect();
    let wrong = chunks
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
            let (x, y) = data.batch(&idx);
            let p = NetProblem::new(net, params.clone(), &x, &y)?;
            let r = settle(&p, 0.0, &SettleConfig::steps(steps), None, 0);
            if r.diverged {
                return Ok(idx.len());
            }
            Ok(p.predictions(&r.state).iter().zip(&y).filter(|(a, b)| a != b).count())
        })
        .collect::<Result<Vec<usize>, ModelError>>()?;
    Ok(wrong.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Mean cross-entropy at the free fixed point.
pub fn mean_loss(net: &Network, params: &Params, data: &Dataset, steps: usize) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let p = NetProblem::new(net, params.clone(), &x, &y)?;
        let r = settle(&p, 0.0, &SettleConfig::steps(steps), None, 0);
        if r.diverged {
            return Err(ModelError::Diverged);
        }
        total += crate::model::loss(&r.state, &y)? * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Gradient estimate for one minibatch and the imaginary residual it dropped.
pub fn minibatch_gradient(
    net: &Network,
    params: &Params,
    x: &RealTensor,
    labels: &[usize],
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<(Params, f64), TrainError> {
    let problem = NetProblem::new(net, params.clone(), x, labels)?;
    let phases = PhaseConfig { rng_seed: noise_seed, ..cfg.phases };
    let est = match &cfg.estimator {
        TrainEstimator::ClassicEp { beta, realizations } => {
            let n = realizations.unwrap_or(1);
            classic_ep(&problem, *beta, &phases, n)
        }
        TrainEstimator::Holomorphic { radius, n_points } => {
            let path = NudgePath::new(*radius, *n_points).map_err(TrainError::Model)?;
            hep_estimate(&problem, &path, &phases)
        }
        TrainEstimator::Online(o) => online_estimate(&problem, o, &phases, None).map(|r| r.estimate),
        TrainEstimator::Adjoint => return Ok((unrolled_adjoint_gradient(&problem, cfg.phases.t_free).grad, 0.0)),
    };
    est.map(|e| (e.grad, e.imag_residual)).map_err(|source| TrainError::Diverged {
        epoch: 0,
        batch: 0,
        source,
        checkpoint: Box::new(Checkpoint::empty()),
    })
}

/// Runs `cfg.epochs` epochs starting from `start` (a fresh init when `None`), calling
/// `on_epoch` after each one.
pub fn train(
    net: &Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    start: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> io::Result<()>,
) -> Result<(Vec<EpochLog>, Checkpoint), TrainError> {
    cfg.validate(net.depth()).map_err(TrainError::Config)?;
    let mut ck = match start {
        Some(c) => {
            c.check_spec(&net.spec)?;
            c
        }
        None => {
            let params = net.init_params(cfg.init_gain, cfg.seed);
            Checkpoint {
                spec: net.spec.clone(),
                velocity: ParamSet::zeros_like(&params),
                params,
                epoch: 0,
                rng_seed: cfg.seed,
            }
        }
    };
    let mut logs = Vec::new();
    while ck.epoch < cfg.epochs {
        let epoch = ck.epoch;
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(ck.rng_seed, epoch as u64)));
        let mut opt = Optimizer { velocity: ck.velocity.clone() };
        let mut params = ck.params.clone();
        let mut imag_sum = 0.0;
        let mut wrong = 0usize;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(idx);
            let seed = mix(mix(ck.rng_seed, epoch as u64), bi as u64 + 1);
            let (g, imag) = match minibatch_gradient(net, &params, &x, &y, cfg, seed) {
                Ok(v) => v,
                Err(TrainError::Diverged { source, .. }) => {
                    return Err(TrainError::Diverged { epoch, batch: bi, source, checkpoint: Box::new(ck) });
                }
                Err(e) => return Err(e),
            };
            imag_sum += imag;
            batches += 1;
            // Training error is measured on the parameters that produced the step.
            let p = NetProblem::new(net, params.clone(), &x, &y)?;
            let free = settle(&p, 0.0, &SettleConfig::steps(cfg.eval_steps), None, 0);
            wrong += if free.diverged { y.len() } else { p.predictions(&free.state).iter().zip(&y).filter(|(a, b)| a != b).count() };
            opt.step(&mut params, &g, cfg, epoch);
        }
        ck = Checkpoint { params, velocity: opt.velocity, epoch: epoch + 1, ..ck };
        let val_err = evaluate(net, &ck.params, val_set, cfg.eval_steps)?;
        let log = EpochLog {
            epoch: epoch + 1,
            train_err: wrong as f64 / train_set.len().max(1) as f64,
            val_err,
            mean_imag_residual: imag_sum / batches.max(1) as f64,
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        info!("epoch {} train_err {:.4} val_err {:.4}", log.epoch, log.train_err, log.val_err);
        on_epoch(&log, &ck)?;
        logs.push(log);
    }
    Ok((logs, ck))
}

pub fn write_log_header(w: impl Write) -> csv::Writer<impl Write> {
    csv::WriterBuilder::new().has_headers(true).from_writer(w)
}

/// Writes training log rows as CSV with columns epoch, train_err, val_err, mean_imag_residual, wall_seconds.
pub fn write_log(w: impl Write, rows: &[EpochLog]) -> io::Result<()> {
    let mut c = write_log_header(w);
    for r in rows {
        c.serialize(r).map_err(io::Error::other)?;
    }
    c.flush()
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint was written for a different network: {0}")]
    SpecMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HOLOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Params,
    pub velocity: Params,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Root seed of the shuffling and noise streams; with `epoch` it fixes all later randomness.
    pub rng_seed: u64,
}

pub fn spec_hash(spec: &NetworkSpec) -> [u8; 32] {
    Sha256::digest(spec.canonical().as_bytes()).into()
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_params(w: &mut impl Write, p: &Params) -> io::Result<()> {
    put_u64(w, p.layers.len() as u64)?;
    for l in &p.layers {
        for t in [&l.weight, &l.bias] {
            put_u64(w, t.shape().len() as u64)?;
            for &d in t.shape() {
                put_u64(w, d as u64)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        if v > self.0.len() as u64 * 8 + 64 {
            return Err(CheckpointError::Corrupt(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    fn params(&mut self) -> Result<Params, CheckpointError> {
        let n = self.len()?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let mut t = Vec::with_capacity(2);
            for _ in 0..2 {
                let rank = self.len()?;
                let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
                let count: usize = shape.iter().product();
                let data = self.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                t.push(Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
            }
            let bias = t.pop().expect("two tensors");
            let weight = t.pop().expect("two tensors");
            layers.push(crate::model::LayerParams { weight, bias });
        }
        Ok(ParamSet { layers })
    }
}

impl Checkpoint {
    fn empty() -> Self {
        Self {
            spec: NetworkSpec::mlp(&[1, 1], crate::model::Activation::Identity),
            params: ParamSet { layers: vec![] },
            velocity: ParamSet { layers: vec![] },
            epoch: 0,
            rng_seed: 0,
        }
    }

    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<(), CheckpointError> {
        if spec_hash(&self.spec) != spec_hash(spec) {
            return Err(CheckpointError::SpecMismatch(format!("{} vs {}", self.spec.canonical(), spec.canonical())));
        }
        Ok(())
    }

    /// Layout: magic, version (u32), sha256 of the canonical spec, spec text (length-prefixed),
    /// epoch, rng seed, params, momentum. Integers and reals are little-endian 64-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        let text = spec_to_text(&self.spec);
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.extend_from_slice(&spec_hash(&self.spec));
        put_u64(&mut w, text.len() as u64).expect("vec write");
        w.extend_from_slice(text.as_bytes());
        put_u64(&mut w, self.epoch as u64).expect("vec write");
        put_u64(&mut w, self.rng_seed).expect("vec write");
        put_params(&mut w, &self.params).expect("vec write");
        put_params(&mut w, &self.velocity).expect("vec write");
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut c = Cursor(bytes);
        if c.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
        let n = c.len()?;
        let text = std::str::from_utf8(c.take(n)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let spec = parse_spec_text(text)?;
        if spec_hash(&spec) != hash {
            return Err(CheckpointError::Corrupt("spec hash does not match stored spec".into()));
        }
        let epoch = c.u64()? as usize;
        let rng_seed = c.u64()?;
        let params = c.params()?;
        let velocity = c.params()?;
        let net = Network::new(spec.clone()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        net.check_params(&params).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        net.check_params(&velocity).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(Self { spec, params, velocity, epoch, rng_seed })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("hckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Line-oriented text form of a spec, stable across builds.
pub fn spec_to_text(spec: &NetworkSpec) -> String {
    use crate::model::LayerSpec;
    let mut s = format!(
        "input {}\nactivation {}\ntau {:e}\n",
        spec.input.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
        match spec.activation {
            crate::model::Activation::ShiftedSigmoid => "shifted-sigmoid",
            crate::model::Activation::Dsilu => "dsilu",
            crate::model::Activation::Identity => "identity",
        },
        spec.tau
    );
    for l in &spec.layers {
        match l {
            LayerSpec::Dense { units } => s.push_str(&format!("dense {units}\n")),
            LayerSpec::Conv { channels, kernel, stride, padding, pool } => {
                s.push_str(&format!("conv {channels} {kernel} {stride} {padding}"));
                if let Some(p) = pool {
                    s.push_str(&format!(" pool {} {}", p.window, p.stride));
                }
                s.push('\n');
            }
        }
    }
    s
}

pub fn parse_spec_text(text: &str) -> Result<NetworkSpec, CheckpointError> {
    use crate::model::{Activation, LayerSpec, PoolSpec};
    let bad = |m: &str| CheckpointError::Corrupt(format!("spec text: {m}"));
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad(t));
    let mut input = None;
    let mut activation = None;
    let mut tau = None;
    let mut layers = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f[0] {
            "input" => input = Some(f[1..].iter().map(|t| num(t)).collect::<Result<Vec<_>, _>>()?),
            "activation" => {
                activation = Some(match f.get(1).copied() {
                    Some("shifted-sigmoid") => Activation::ShiftedSigmoid,
                    Some("dsilu") => Activation::Dsilu,
                    Some("identity") => Activation::Identity,
                    _ => return Err(bad(line)),
                })
            }
            "tau" => tau = Some(f.get(1).and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| bad(line))?),
            "dense" if f.len() == 2 => layers.push(LayerSpec::Dense { units: num(f[1])? }),
            "conv" if f.len() == 5 || (f.len() == 8 && f[5] == "pool") => {
                let pool = if f.len() == 8 {
                    Some(PoolSpec { window: num(f[6])?, stride: num(f[7])? })
                } else {
                    None
                };
                layers.push(LayerSpec::Conv {
                    channels: num(f[1])?,
                    kernel: num(f[2])?,
                    stride: num(f[3])?,
                    padding: num(f[4])?,
                    pool,
                });
            }
            _ => return Err(bad(line)),
        }
    }
    Ok(NetworkSpec {
        input: input.ok_or_else(|| bad("missing input"))?,
        layers,
        activation: activation.ok_or_else(|| bad("missing activation"))?,
        tau: tau.ok_or_else(|| bad("missing tau"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec, PoolSpec};

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_parsing_and_errors() {
        let b = idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 1, 2, 3, 4, 5, 6]);
        let (dims, data) = parse_idx(&b, IDX_IMAGES_MAGIC, "x").unwrap();
        assert_eq!(dims, vec![2, 2, 2]);
        assert_eq!(data.len(), 8);

        let mut bad = b.clone();
        bad[3] = 0x07;
        let e = parse_idx(&bad, IDX_IMAGES_MAGIC, "x").unwrap_err();
        assert!(matches!(e, DataError::BadMagic { offset: 0, .. }));
        assert!(e.to_string().contains("offset 0"));

        let e = parse_idx(&b[..b.len() - 1], IDX_IMAGES_MAGIC, "x").unwrap_err();
        assert!(matches!(e, DataError::Truncated { .. }));
    }

    #[test]
    fn mnist_files_parse_and_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = idx_bytes(IDX_IMAGES_MAGIC, &[3, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 0, 255, 255, 255, 255]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &imgs).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_bytes(IDX_LABELS_MAGIC, &[3], &[1, 0, 9])).unwrap();
        let d = load_mnist(dir.path()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.sample_shape, vec![4]);
        assert_eq!(d.sample(0), &[0.0, 1.0, 0.2, 0.4]);
        assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.labels, vec![1, 0, 9]);

        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_bytes(IDX_LABELS_MAGIC, &[2], &[1, 0])).unwrap();
        assert!(matches!(load_mnist(dir.path()), Err(DataError::CountMismatch { images: 3, labels: 2 })));
    }

    #[test]
    fn gzipped_mnist_files_load() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let gz = |name: &str, bytes: &[u8]| {
            let f = std::fs::File::create(dir.path().join(format!("{name}.gz"))).unwrap();
            let mut e = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            e.write_all(bytes).unwrap();
            e.finish().unwrap();
        };
        gz("train-images-idx3-ubyte", &idx_bytes(IDX_IMAGES_MAGIC, &[2, 1, 2], &[0, 255, 51, 0]));
        gz("train-labels-idx1-ubyte", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[7, 3]));
        let d = load_mnist(dir.path()).unwrap();
        assert_eq!(d.images, vec![0.0, 1.0, 0.2, 0.0]);
        assert_eq!(d.labels, vec![7, 3]);
        assert!(matches!(load_mnist(&dir.path().join("absent")), Err(DataError::Io(_))));
    }

    #[test]
    fn synthetic_data_is_reproducible() {
        let a = synth_dataset(1, &[6], 4, 9).unwrap();
        let b = synth_dataset(1, &[6], 4, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.len(), 6);
        assert!(a.labels[0] < 4);
        assert_ne!(a, synth_dataset(1, &[6], 4, 10).unwrap());
    }

    #[test]
    fn batches_put_samples_on_the_last_axis() {
        let d = Dataset::new(vec![2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0, 1, 0], 2).unwrap();
        let (x, y) = d.batch(&[2, 0]);
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[5.0, 1.0, 6.0, 2.0]);
        assert_eq!(y, vec![0, 0]);
        let (tr, va) = d.split(1);
        assert_eq!((tr.len(), va.len()), (2, 1));
        assert_eq!(va.sample(0), &[5.0, 6.0]);
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: PerLayer::Global(0.1),
            momentum: 0.0,
            weight_decay: PerLayer::Global(0.0),
            epochs: 3,
            schedule: LrSchedule::Constant,
            estimator: TrainEstimator::Holomorphic { radius: 0.4, n_points: 4 },
            phases: PhaseConfig::default(),
            eval_steps: 100,
            init_gain: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn sgd_step_examples() {
        let net = Network::new(NetworkSpec::mlp(&[3, 2, 2], Activation::ShiftedSigmoid)).unwrap();
        let p0 = net.init_params(1.0, 1);
        let c = cfg();
        let mut p = p0.clone();
        let mut opt = Optimizer::new(&p);
        sgd_step(&mut p, &mut opt, &ParamSet::zeros_like(&p0), &c, 0);
        assert_eq!(p, p0);
        let g = p0.map(|v| v * 0.5 + 1.0);
        sgd_step(&mut p, &mut opt, &g, &c, 0);
        let mut expect = p0.clone();
        expect.axpy(-0.1, &g);
        assert_eq!(p, expect);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut c = cfg();
        c.epochs = 50;
        c.learning_rate = PerLayer::Layers(vec![0.2, 0.05]);
        c.schedule = LrSchedule::Cosine { final_fraction: 1e-3 };
        assert!((c.lr(0, 0) - 0.2).abs() < 1e-15);
        assert!((c.lr(1, 0) - 0.05).abs() < 1e-15);
        assert!((c.lr(0, 49) - 2e-4).abs() < 1e-9);
        assert!((c.lr(1, 49) - 5e-5).abs() < 1e-9);
        let mid = c.lr(0, 24);
        assert!(mid < 0.2 && mid > 2e-4);
        assert!(c.validate(2).is_ok());
        c.learning_rate = PerLayer::Layers(vec![0.2]);
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn evaluate_examples() {
        // Zero readout weights and a large bias on class 0 predict class 0 everywhere.
        let net = Network::new(NetworkSpec::mlp(&[4, 4, 10], Activation::ShiftedSigmoid)).unwrap();
        let mut p = net.zero_params();
        p.layers[1].bias.data_mut()[0] = 5.0;
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let d = Dataset::new(vec![4], vec![0.5; 200], labels.clone(), 10).unwrap();
        assert!((evaluate(&net, &p, &d, 10).unwrap() - 0.9).abs() < 1e-12);

        // Readout copies a one-hot input: perfect classification.
        let mut p = net.zero_params();
        for i in 0..4 {
            p.layers[0].weight.data_mut()[i * 4 + i] = 20.0;
            p.layers[1].weight.data_mut()[i * 4 + i] = 20.0;
        }
        let mut imgs = Vec::new();
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        for &l in &labels {
            imgs.extend((0..4).map(|j| if j == l { 1.0 } else { 0.0 }));
        }
        let d = Dataset::new(vec![4], imgs, labels, 10).unwrap();
        assert_eq!(evaluate(&net, &p, &d, 10).unwrap(), 0.0);
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = NetworkSpec {
            input: vec![1, 8, 8],
            layers: vec![
                LayerSpec::Conv { channels: 2, kernel: 3, stride: 1, padding: 1, pool: Some(PoolSpec { window: 2, stride: 2 }) },
                LayerSpec::Conv { channels: 3, kernel: 3, stride: 1, padding: 0, pool: None },
                LayerSpec::Dense { units: 4 },
            ],
            activation: Activation::Dsilu,
            tau: 0.7,
        };
        let back = parse_spec_text(&spec_to_text(&spec)).unwrap();
        assert_eq!(back, spec);
        assert_eq!(spec_hash(&back), spec_hash(&spec));
    }

    #[test]
    fn checkpoint_round_trip_resumes_bit_identically() {
        let net = Network::new(NetworkSpec::mlp(&[6, 5, 3], Activation::ShiftedSigmoid)).unwrap();
        let data = synth_dataset(24, &[6], 3, 5).unwrap();
        let (tr, va) = data.split(8);
        let mut c = cfg();
        c.momentum = 0.9;
        c.phases.noise_std = 0.01;
        c.epochs = 2;
        let (full_log, full) = train(&net, &tr, &va, &c, None, |_, _| Ok(())).unwrap();

        c.epochs = 1;
        let (_, half) = train(&net, &tr, &va, &c, None, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.hckpt");
        half.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, half);
        c.epochs = 2;
        let (log, resumed) = train(&net, &tr, &va, &c, Some(loaded), |_, _| Ok(())).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(log[0].val_err, full_log[1].val_err);

        let mut bytes = half.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
        let other = Network::new(NetworkSpec::mlp(&[6, 4, 3], Activation::ShiftedSigmoid)).unwrap();
        assert!(matches!(train(&other, &tr, &va, &c, Some(half), |_, _| Ok(())), Err(TrainError::Checkpoint(_))));
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_task() {
        // Labels given by the sign pattern of two inputs.
        let mut d = synth_dataset(64, &[4], 2, 11).unwrap();
        for i in 0..d.len() {
            d.labels[i] = (d.sample(i)[0] > 0.0) as usize;
        }
        let net = Network::new(NetworkSpec::mlp(&[4, 8, 2], Activation::ShiftedSigmoid)).unwrap();
        let mut c = cfg();
        c.epochs = 1;
        c.batch_size = 8;
        c.learning_rate = PerLayer::Global(0.5);
        let p0 = net.init_params(c.init_gain, c.seed);
        let before = mean_loss(&net, &p0, &d, 100).unwrap();
        let (_, ck) = train(&net, &d, &d.subset(0..0), &c, None, |_, _| Ok(())).unwrap();
        let after = mean_loss(&net, &ck.params, &d, 100).unwrap();
        assert!(after < before, "{after} !< {before}");
    }
}
