//! Synchronous decentralized training: every iteration each device samples a
//! batch, publishes its style vector, receives its neighbors' styles and
//! models, takes a style-augmented gradient step and mixes parameters with
//! Metropolis-Hastings weights.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{BatchSampler, Dataset, Shard};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::network::{metropolis_weights, spectral_gap, DeviceGraph, GraphKind, MixingMatrix};
use crate::stats::{device_style_vector, scalar_count, StyleVector};
use crate::style::{StyleLayerConfig, StyleMode, StylePlan};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `alpha0 / sqrt(K + 1)` at every step.
    InvSqrt(f64),
    /// `alpha0 * (1 + cos(pi k / K)) / 2`.
    Cosine(f64),
}

impl LrSchedule {
    pub fn rate(&self, k: usize, iterations: usize) -> f64 {
        match *self {
            LrSchedule::Constant(a) => a,
            LrSchedule::InvSqrt(a) => a / ((iterations + 1) as f64).sqrt(),
            LrSchedule::Cosine(a) => a * 0.5 * (1.0 + (PI * k as f64 / iterations.max(1) as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant(a) => write!(f, "constant({a})"),
            LrSchedule::InvSqrt(a) => write!(f, "inv_sqrt({a})"),
            LrSchedule::Cosine(a) => write!(f, "cosine({a})"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    /// `constant(a)`, `inv_sqrt(a)` or `cosine(a)`; a bare number is constant.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("cannot parse learning-rate schedule '{s}'"));
        let num = |r: &str| r.trim().parse::<f64>().map_err(|_| bad());
        if let Ok(a) = t.parse::<f64>() {
            return Ok(LrSchedule::Constant(a));
        }
        let (name, rest) = t.split_once('(').ok_or_else(bad)?;
        let a = num(rest.strip_suffix(')').ok_or_else(bad)?)?;
        match name {
            "constant" => Ok(LrSchedule::Constant(a)),
            "inv_sqrt" => Ok(LrSchedule::InvSqrt(a)),
            "cosine" => Ok(LrSchedule::Cosine(a)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub graph: GraphKind,
    pub m: usize,
    pub seed: u64,
    pub model: ModelSpec,
    pub style: StyleLayerConfig,
    pub batch: usize,
    pub iterations: usize,
    pub lr: LrSchedule,
    /// Probe the average model every this many iterations (0 disables).
    pub probe_every: usize,
    pub parallel: bool,
    /// Start each device from its own initialization instead of a shared one.
    pub distinct_init: bool,
    /// Skip gradients entirely; only gossip averaging runs.
    pub consensus_only: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            graph: GraphKind::Complete,
            m: 3,
            seed: 1,
            model: ModelSpec::default(),
            style: StyleLayerConfig::default(),
            batch: 16,
            iterations: 300,
            lr: LrSchedule::Cosine(0.2),
            probe_every: 0,
            parallel: true,
            distinct_init: false,
            consensus_only: false,
        }
    }
}

/// Independent seed for stream `stream` of device `device`.
pub fn stream_seed(seed: u64, device: usize, stream: u64) -> u64 {
    let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((device as u64) << 20) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const DATA_STREAM: u64 = 1;
pub const AUGMENT_STREAM: u64 = 2;
pub const GRAPH_STREAM: u64 = 3;
pub const INIT_STREAM: u64 = 4;

/// A style vector on the wire, tagged with the iteration and batch it was
/// computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePayload {
    pub from: usize,
    pub k: usize,
    pub batch_hash: u64,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Device {
    pub id: usize,
    pub params: ModelParams,
    pub shard: Dataset,
    pub neighbors: Vec<usize>,
    pub inbox_styles: BTreeMap<usize, StylePayload>,
    pub inbox_models: BTreeMap<usize, ModelParams>,
    sampler: BatchSampler,
    aug_rng: ChaCha8Rng,
    batch: Option<(Tensor4, Vec<usize>, u64)>,
    outbox: Option<StylePayload>,
}

impl Device {
    pub fn new(id: usize, params: ModelParams, shard: Dataset, neighbors: Vec<usize>, seed: u64) -> Result<Self> {
        let sampler = BatchSampler::new(shard.len(), stream_seed(seed, id, DATA_STREAM))?;
        let aug_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, id, AUGMENT_STREAM));
        Ok(Self {
            id,
            params,
            shard,
            neighbors,
            inbox_styles: BTreeMap::new(),
            inbox_models: BTreeMap::new(),
            sampler,
            aug_rng,
            batch: None,
            outbox: None,
        })
    }

    /// Draws this iteration's batch; returns its hash.
    pub fn sample_batch(&mut self, batch: usize) -> Result<u64> {
        let idx = self.sampler.next_batch(batch);
        let hash = batch_hash(idx.iter().map(|&i| self.shard.ids[i]));
        let (x, y) = self.shard.batch(&idx)?;
        self.batch = Some((x, y, hash));
        Ok(hash)
    }

    pub fn current_batch(&self) -> Option<(&Tensor4, &[usize])> {
        self.batch.as_ref().map(|(x, y, _)| (x, y.as_slice()))
    }
}

fn for_each_device<F>(devices: &mut [Device], parallel: bool, f: F) -> Result<()>
where
    F: Fn(&mut Device) -> Result<()> + Sync + Send,
{
    if parallel {
        devices.par_iter_mut().map(f).collect()
    } else {
        devices.iter_mut().map(f).collect()
    }
}

fn batch_hash(ids: impl Iterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// One stochastic sample of the device's style-augmented gradient on its
/// current batch. In styleddg mode the inbox must hold this iteration's
/// payloads (`k`, and the sender batch hashes in `hashes`).
pub fn local_gradient(
    model: &Model,
    dev: &mut Device,
    style: &StyleLayerConfig,
    k: usize,
    hashes: &[u64],
) -> Result<(f64, Vec<f64>)> {
    let (x, y, _) = dev.batch.as_ref().ok_or_else(|| Error::State(format!("device {} has no batch", dev.id)))?;
    let mut decoded = Vec::new();
    if style.mode == StyleMode::StyleDdg {
        if dev.inbox_styles.is_empty() {
            return Err(Error::Protocol(format!("device {} has no neighbor styles", dev.id)));
        }
        for (&j, p) in &dev.inbox_styles {
            if p.k != k || hashes.get(j) != Some(&p.batch_hash) {
                return Err(Error::Protocol(format!(
                    "device {} holds a stale style from {j} (iteration {}, expected {k})",
                    dev.id, p.k
                )));
            }
            decoded.push((j, StyleVector::from_bytes(&p.bytes)?));
        }
    }
    let inbox: Vec<(usize, &StyleVector)> = decoded.iter().map(|(j, sv)| (*j, sv)).collect();
    let plan = StylePlan::sample(style, &mut dev.aug_rng, x.batch(), &model.spec().hook_channels(), &inbox)?;
    model.loss_and_grad(&dev.params, x, y, &plan)
}

/// `theta_i + sum_j w_ij (theta_j - theta_i) - lr * g_i` for every device,
/// all read from the same snapshot.
pub fn consensus_step(params: &[ModelParams], w: &MixingMatrix, lr: f64, grads: &[Vec<f64>]) -> Vec<ModelParams> {
    let m = params.len();
    (0..m)
        .map(|i| {
            let own = &params[i].values;
            let mut next = own.clone();
            for j in (0..m).filter(|&j| j != i && w.get(i, j) != 0.0) {
                let p = w.get(i, j);
                for (v, (tj, ti)) in next.iter_mut().zip(params[j].values.iter().zip(own)) {
                    *v += p * (tj - ti);
                }
            }
            if lr != 0.0 {
                for (v, g) in next.iter_mut().zip(&grads[i]) {
                    *v -= lr * g;
                }
            }
            ModelParams { values: next }
        })
        .collect()
}

pub fn average_params(params: &[ModelParams]) -> ModelParams {
    let n = params[0].len();
    let mut avg = vec![0.0; n];
    for p in params {
        avg.iter_mut().zip(&p.values).for_each(|(a, v)| *a += v);
    }
    avg.iter_mut().for_each(|a| *a /= params.len() as f64);
    ModelParams { values: avg }
}

/// `sum_i ||theta_i - theta_bar||^2 / m`.
pub fn disagreement(params: &[ModelParams]) -> f64 {
    let avg = average_params(params);
    params.iter().map(|p| p.values.iter().zip(&avg.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>()
        / params.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub lr: f64,
    /// Training loss of each device on its batch (0 in consensus-only runs).
    pub losses: Vec<f64>,
    /// Disagreement after the update.
    pub disagreement: f64,
    /// `||grad F(theta_bar)||^2` on the probe batch after the update.
    pub grad_norm_sq: Option<f64>,
    pub bytes_model: u64,
    pub bytes_style: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub initial_disagreement: f64,
    pub initial_grad_norm_sq: Option<f64>,
    /// Seconds per iteration.
    pub timings: Vec<f64>,
    pub interrupted: bool,
    pub params: Vec<ModelParams>,
}

impl RunOutput {
    /// Mean of the probe estimates at the initial point and after every
    /// probed iteration.
    pub fn running_grad_norm(&self) -> Option<f64> {
        let mut vals: Vec<f64> = self.initial_grad_norm_sq.into_iter().collect();
        vals.extend(self.records.iter().filter_map(|r| r.grad_norm_sq));
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub struct Simulation {
    cfg: SimConfig,
    model: Model,
    graph: DeviceGraph,
    mixing: MixingMatrix,
    rho: f64,
    devices: Vec<Device>,
    probe: Option<(Tensor4, Vec<usize>)>,
    k: usize,
}

impl Simulation {
    /// `shards[i]` becomes device `i`'s data; `probe` is the fixed batch for
    /// gradient-norm estimates.
    pub fn new(cfg: SimConfig, shards: Vec<Shard>, probe: Option<(Tensor4, Vec<usize>)>) -> Result<Self> {
        let model = Model::new(cfg.model.clone())?;
        cfg.style.validate(cfg.model.hooks.len())?;
        if cfg.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if cfg.style.mode == StyleMode::StyleDdg && cfg.batch % 2 != 0 {
            return Err(Error::Config(format!("styleddg needs an even batch size, got {}", cfg.batch)));
        }
        if shards.len() != cfg.m {
            return Err(Error::Config(format!("{} shards for {} devices", shards.len(), cfg.m)));
        }
        let graph = DeviceGraph::build(&cfg.graph, cfg.m, stream_seed(cfg.seed, 0, GRAPH_STREAM))?;
        if cfg.style.mode == StyleMode::StyleDdg && cfg.m > 1 && (0..cfg.m).any(|i| graph.degree(i) == 0) {
            return Err(Error::Config("styleddg needs every device to have a neighbor".into()));
        }
        let mixing = metropolis_weights(&graph);
        let rho = if cfg.m > 1 { spectral_gap(&mixing)?.0 } else { 0.0 };
        let shared = model.init_params(stream_seed(cfg.seed, 0, INIT_STREAM));
        let devices = shards
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let params = if cfg.distinct_init { model.init_params(stream_seed(cfg.seed, i, INIT_STREAM)) } else { shared.clone() };
                Device::new(i, params, s.data, graph.neighbors(i).to_vec(), cfg.seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, model, graph, mixing, rho, devices, probe, k: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn graph(&self) -> &DeviceGraph {
        &self.graph
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn params(&self) -> Vec<ModelParams> {
        self.devices.iter().map(|d| d.params.clone()).collect()
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    /// Bytes of one model message and one style message.
    pub fn message_bytes(&self) -> (u64, u64) {
        let model = 8 * self.model.num_params() as u64;
        let style = 8 * scalar_count(&self.cfg.model.hook_channels()) as u64;
        (model, style)
    }

    pub fn probe_grad_norm_sq(&self) -> Result<Option<f64>> {
        let Some((x, y)) = &self.probe else { return Ok(None) };
        let avg = average_params(&self.params());
        let (_, g) = self.model.loss_and_grad(&avg, x, y, &StylePlan::identity(self.cfg.model.hooks.len()))?;
        Ok(Some(g.iter().map(|v| v * v).sum()))
    }

    /// One synchronous iteration.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let k = self.k;
        let lr = self.cfg.lr.rate(k, self.cfg.iterations);
        let (model_msg, style_msg) = self.message_bytes();
        let edges_directed: u64 = (0..self.cfg.m).map(|i| self.graph.degree(i) as u64).sum();
        let sharing = self.cfg.style.mode == StyleMode::StyleDdg;
        let m = self.cfg.m;
        let (losses, grads): (Vec<f64>, Vec<Vec<f64>>);
        if self.cfg.consensus_only {
            losses = vec![0.0; self.cfg.m];
            grads = vec![Vec::new(); self.cfg.m];
        } else {
            // Phase 1: batch and style vector from the current parameters.
            let (model, batch, eps_var) = (&self.model, self.cfg.batch, self.cfg.style.eps_var);
            let hooks = self.cfg.model.hooks.clone();
            for_each_device(&mut self.devices, self.cfg.parallel, |d| {
                let hash = d.sample_batch(batch)?;
                d.outbox = if sharing {
                    let (x, _) = d.current_batch().unwrap();
                    let sv = device_style_vector(model, &d.params, x, &hooks, eps_var)?;
                    Some(StylePayload { from: d.id, k, batch_hash: hash, bytes: sv.to_bytes() })
                } else {
                    None
                };
                Ok(())
            })?;
            // Exchange.
            let hashes: Vec<u64> = self.devices.iter().map(|d| d.batch.as_ref().unwrap().2).collect();
            let outboxes: Vec<Option<StylePayload>> = self.devices.iter().map(|d| d.outbox.clone()).collect();
            let snapshot = self.params();
            for d in &mut self.devices {
                d.inbox_styles.clear();
                d.inbox_models.clear();
                for &j in &d.neighbors {
                    if let Some(p) = &outboxes[j] {
                        d.inbox_styles.insert(j, p.clone());
                    }
                    d.inbox_models.insert(j, snapshot[j].clone());
                }
            }
            // Phase 2: local gradients.
            let style = self.cfg.style.clone();
            let results: Vec<(f64, Vec<f64>)> = if self.cfg.parallel {
                self.devices.par_iter_mut().map(|d| local_gradient(model, d, &style, k, &hashes)).collect::<Result<_>>()?
            } else {
                self.devices.iter_mut().map(|d| local_gradient(model, d, &style, k, &hashes)).collect::<Result<_>>()?
            };
            (losses, grads) = results.into_iter().unzip();
        }
        // Phase 3: simultaneous consensus update.
        let snapshot = self.params();
        let next = consensus_step(&snapshot, &self.mixing, if self.cfg.consensus_only { 0.0 } else { lr }, &grads);
        for (d, p) in self.devices.iter_mut().zip(next) {
            d.params = p;
        }
        self.k += 1;
        let probe_now = self.cfg.probe_every > 0 && self.k % self.cfg.probe_every == 0;
        Ok(IterationRecord {
            k,
            lr,
            losses,
            disagreement: disagreement(&self.params()),
            grad_norm_sq: if probe_now { self.probe_grad_norm_sq()? } else { None },
            bytes_model: edges_directed * model_msg,
            bytes_style: if sharing && m > 1 { edges_directed * style_msg } else { 0 },
        })
    }

    /// Runs the remaining iterations. Stops early, with `interrupted` set,
    /// once `stop` is raised; `on_record` sees every record as it is made.
    pub fn run(&mut self, stop: Option<&AtomicBool>, mut on_record: impl FnMut(&IterationRecord)) -> Result<RunOutput> {
        let initial_disagreement = disagreement(&self.params());
        let initial_grad_norm_sq = if self.cfg.probe_every > 0 { self.probe_grad_norm_sq()? } else { None };
        let mut records = Vec::with_capacity(self.cfg.iterations);
        let mut timings = Vec::with_capacity(self.cfg.iterations);
        let mut interrupted = false;
        while self.k < self.cfg.iterations {
            if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                interrupted = true;
                break;
            }
            let t = Instant::now();
            let r = self.step()?;
            timings.push(t.elapsed().as_secs_f64());
            on_record(&r);
            records.push(r);
        }
        Ok(RunOutput { records, initial_disagreement, initial_grad_norm_sq, timings, interrupted, params: self.params() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_device: Vec<f64>,
    /// Accuracy of the parameter average.
    pub average_model: f64,
}

impl EvalReport {
    pub fn mean_device(&self) -> f64 {
        self.per_device.iter().sum::<f64>() / self.per_device.len() as f64
    }
}

/// Top-1 accuracy of plain (style-free) inference.
pub fn accuracy(model: &Model, params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.predict(params, &x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn evaluate(model: &Model, params: &[ModelParams], data: &Dataset) -> Result<EvalReport> {
    let per_device = params.iter().map(|p| accuracy(model, p, data)).collect::<Result<Vec<_>>>()?;
    let average_model = accuracy(model, &average_params(params), data)?;
    Ok(EvalReport { per_device, average_model })
}
