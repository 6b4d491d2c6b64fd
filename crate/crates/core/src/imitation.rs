//! Expert demonstrations and supervised training of the graph block.
//!
//! Each [`DatasetSample`] is a network-graph snapshot with the expert's
//! joint action. The network acts on one node at a time and every
//! aggregation feeding it is parameter-free, so training works on per-node
//! rows `(channel stack of node i, action of robot i)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::InnovationInfo;
use crate::gblock::{
    cross_entropy, node_features, policy_backward, policy_forward, policy_infer, select_action, Architecture,
    ChannelStack, PolicyParams,
};
use crate::graph::{EdgeSet, NetworkGraph, NodeAttribute};
use crate::harness::{run_episode_with_snapshots, Policy, ScenarioConfig};
use crate::world::{Action, Cell, GridMap};

pub const DATASET_MAGIC: &[u8; 8] = b"AIADATA\0";
pub const DATASET_VERSION: u32 = 1;

/// A graph snapshot and the expert's action for every robot.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub graph: NetworkGraph,
    pub labels: Vec<Action>,
}

impl DatasetSample {
    /// `(channel stack, label)` for every active node.
    pub fn node_rows(&self) -> Result<Vec<(ChannelStack, Action)>> {
        (0..self.graph.len())
            .filter(|&i| self.graph.active[i])
            .map(|i| node_features(&self.graph, i).map(|(_, _, _, s)| (s, self.labels[i])))
            .collect()
    }
}

fn env_seed(seed: u64, env: usize) -> u64 {
    seed ^ (env as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Runs one closed-loop expert episode per environment and keeps
/// `samples_per_episode` distinct steps from each, chosen uniformly.
/// Environments the expert cannot solve are skipped; fewer than half
/// succeeding is an error.
pub fn generate_dataset(num_envs: usize, template: &ScenarioConfig, samples_per_episode: usize, seed: u64) -> Result<Vec<DatasetSample>> {
    template.validate()?;
    let per_env: Vec<Option<Vec<DatasetSample>>> = (0..num_envs)
        .into_par_iter()
        .map(|env| {
            let s = env_seed(seed, env);
            let episode = template
                .instantiate(s)
                .and_then(|inst| run_episode_with_snapshots(&inst, &Policy::Expert, s, template.horizon_cap));
            let (result, snaps) = match episode {
                Ok(v) => v,
                Err(e) => {
                    log::info!("environment {env} skipped: {e}");
                    return None;
                }
            };
            if !result.success {
                log::info!("environment {env} skipped: expert did not finish within {}", template.horizon_cap);
                return None;
            }
            let usable: Vec<_> = snaps
                .into_iter()
                .filter_map(|s| {
                    let labels = (0..s.graph.len())
                        .map(|i| if s.graph.active[i] { s.actions[i] } else { Some(Action::Left) })
                        .collect::<Option<Vec<_>>>()?;
                    Some(DatasetSample { graph: s.graph, labels })
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let k = samples_per_episode.min(usable.len());
            let mut picked = rand::seq::index::sample(&mut rng, usable.len(), k).into_vec();
            picked.sort_unstable();
            Some(picked.into_iter().map(|i| usable[i].clone()).collect())
        })
        .collect();
    let succeeded = per_env.iter().filter(|e| e.is_some()).count();
    if 2 * succeeded < num_envs {
        return Err(Error::DatasetGeneration { succeeded, attempted: num_envs });
    }
    Ok(per_env.into_iter().flatten().flatten().collect())
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { kind: "dataset", reason: reason.into() }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(format!("{what} {v} exceeds u32")))
}

/// Layout (little-endian): magic, `u32` version, `u32` sample count, `u32`
/// height, `u32` width, `u32` state dimension, `f64` cell size; then per
/// sample: `u32` robot count, occupancy as `f32` row-major, adjacency as
/// bytes, weights as `f64`, active flags as bytes, per robot `u32` row,
/// `u32` col, `μ`, `Ω`, `Z` as `f64`; finally one label byte per robot.
/// All samples share grid shape, cell size and state dimension.
pub fn write_dataset<W: Write>(samples: &[DatasetSample], mut w: W) -> Result<()> {
    let first = samples.first().ok_or_else(|| format_err("cannot write an empty dataset"))?;
    let map = &first.graph.map;
    let dim = first.graph.attributes.first().map_or(0, |a| a.mu.len());
    w.write_all(DATASET_MAGIC)?;
    for v in [DATASET_VERSION, u32_of(samples.len(), "sample count")?, u32_of(map.height(), "height")?, u32_of(map.width(), "width")?, u32_of(dim, "dimension")?] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&map.cell_size().to_le_bytes())?;
    for s in samples {
        let g = &s.graph;
        let n = g.len();
        if g.map.height() != map.height() || g.map.width() != map.width() || g.map.cell_size() != map.cell_size() {
            return Err(format_err("samples use different grid shapes"));
        }
        if s.labels.len() != n {
            return Err(format_err("label count differs from robot count"));
        }
        w.write_all(&u32_of(n, "robot count")?.to_le_bytes())?;
        for &o in g.map.occupancy() {
            w.write_all(&(if o { 1.0f32 } else { 0.0f32 }).to_le_bytes())?;
        }
        w.write_all(&g.edges.adjacency().iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        for v in g.weights.transpose().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&g.active.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
        for a in &g.attributes {
            if a.mu.len() != dim {
                return Err(format_err("samples use different state dimensions"));
            }
            w.write_all(&u32_of(a.p.row, "row")?.to_le_bytes())?;
            w.write_all(&u32_of(a.p.col, "col")?.to_le_bytes())?;
            for m in [a.mu.as_slice(), a.omega.as_slice(), a.z.0.as_slice()] {
                for v in m {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.write_all(&s.labels.iter().map(|a| a.index() as u8).collect::<Vec<_>>())?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.r.read_exact(&mut b).map_err(|e| format_err(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(8 * n)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<DatasetSample>> {
    let mut c = Cursor { r };
    if c.bytes(8)?.as_slice() != DATASET_MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION as usize {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let (count, height, width, dim) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let cell_size = c.f64s(1)?[0];
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut shared_map: Option<Arc<GridMap>> = None;
    for _ in 0..count {
        let n = c.u32()?;
        let occ: Vec<bool> = c
            .bytes(4 * height * width)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) != 0.0)
            .collect();
        let map = match &shared_map {
            Some(m) if m.occupancy() == occ.as_slice() => Arc::clone(m),
            _ => {
                let m = Arc::new(GridMap::new(height, width, cell_size, occ)?);
                shared_map = Some(Arc::clone(&m));
                m
            }
        };
        let adj = c.bytes(n * n)?;
        if adj.iter().any(|&b| b > 1) {
            return Err(format_err("adjacency byte is not 0 or 1"));
        }
        let edges = EdgeSet::from_adjacency(n, adj.into_iter().map(|b| b == 1).collect())?;
        let weights = DMatrix::from_row_slice(n, n, &c.f64s(n * n)?);
        let active = c.bytes(n)?.into_iter().map(|b| b != 0).collect();
        let mut attributes = Vec::with_capacity(n);
        for _ in 0..n {
            let p = Cell::new(c.u32()?, c.u32()?);
            let mu = DVector::from_vec(c.f64s(dim)?);
            let omega = DMatrix::from_vec(dim, dim, c.f64s(dim * dim)?);
            let z = InnovationInfo(DMatrix::from_vec(dim, dim, c.f64s(dim * dim)?));
            attributes.push(NodeAttribute { p, z, mu, omega });
        }
        let labels = c
            .bytes(n)?
            .into_iter()
            .map(|b| Action::from_index(b as usize).ok_or_else(|| format_err(format!("label byte {b}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(DatasetSample { graph: NetworkGraph { attributes, edges, weights, map, active }, labels });
    }
    let mut rest = [0u8; 1];
    if c.r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes"));
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[DatasetSample], path: &Path) -> Result<()> {
    write_dataset(samples, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetSample>> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Graphs per minibatch; the loss is the mean over their nodes.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub samples_per_episode: usize,
    pub val_fraction: f64,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr_start: 1e-4,
            lr_end: 1e-6,
            weight_decay: 1e-5,
            seed: 0,
            samples_per_episode: 10,
            val_fraction: 0.1,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_end >= 0.0) || !(self.lr_start >= self.lr_end) || !self.lr_start.is_finite() {
            return Err(Error::Config(format!("need lr_start ≥ lr_end ≥ 0, got {} and {}", self.lr_start, self.lr_end)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("weight_decay must be ≥ 0 and val_fraction in [0, 1)".into()));
        }
        self.arch.validate()
    }

    /// Cosine annealing from `lr_start` at epoch 0 to `lr_end` at the last
    /// epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let phase = std::f64::consts::PI * epoch as f64 / (self.epochs - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + phase.cos())
    }
}

/// Adaptive-moment optimizer with bias correction and decoupled decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let update = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            params[k] -= lr * (update + self.weight_decay * params[k]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss (the last epoch when there
    /// is no validation split).
    pub params: PolicyParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded shuffle split into `(train, validation)` sample indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n >= 2 { ((n as f64 * val_fraction).round() as usize).min(n - 1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

type Row = (ChannelStack, Action);

fn rows_of(samples: &[DatasetSample]) -> Result<Vec<Vec<Row>>> {
    samples.par_iter().map(|s| s.node_rows()).collect()
}

/// Mean loss and gradient over a set of rows, reduced in row order.
fn batch_gradient(params: &PolicyParams, rows: &[&Row]) -> Result<(f64, Vec<f64>)> {
    let parts = rows
        .par_iter()
        .map(|(stack, label)| {
            let (dist, cache) = policy_forward(stack, params)?;
            let (loss, dlogits) = cross_entropy(&dist, *label);
            Ok((loss, policy_backward(params, &cache, &dlogits)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = rows.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn mean_loss(params: &PolicyParams, rows: &[&Row]) -> Result<(f64, f64)> {
    let per = rows
        .par_iter()
        .map(|(stack, label)| {
            let d = policy_infer(stack, params)?;
            Ok((cross_entropy(&d, *label).0, (select_action(&d) == *label) as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len().max(1) as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<usize>() as f64 / n))
}

/// Supervised training from a seeded initialization.
pub fn train(dataset: &[DatasetSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let init = PolicyParams::init(config.arch, config.seed);
    train_from(dataset, config, init)
}

/// Supervised training starting from `params`.
pub fn train_from(dataset: &[DatasetSample], config: &TrainConfig, mut params: PolicyParams) -> Result<TrainOutcome> {
    config.validate()?;
    params.check()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let rows = rows_of(dataset)?;
    let (mut train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, config.seed);
    let val_rows: Vec<&Row> = val_idx.iter().flat_map(|&i| rows[i].iter()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(params.len(), config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let order_of_train = train_idx.clone();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Row> = chunk.iter().flat_map(|&i| rows[i].iter()).collect();
            if batch.is_empty() {
                continue;
            }
            let (loss, grad) = batch_gradient(&params, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * batch.len() as f64;
            count += batch.len();
            opt.step(&mut params.values, &grad, lr);
            params.round_to_f32();
        }
        let train_loss = total / count.max(1) as f64;
        let (val_loss, val_accuracy) = if val_rows.is_empty() {
            (None, None)
        } else {
            let (l, a) = mean_loss(&params, &val_rows)?;
            (Some(l), Some(a))
        };
        log::info!("epoch {epoch}: lr {lr:.3e} train {train_loss:.4} val {val_loss:?} acc {val_accuracy:?}");
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        if score <= best.0 || val_loss.is_none() {
            best = (score, params.clone(), epoch);
        }
        history.push(EpochStats { epoch, lr, train_loss, val_loss, val_accuracy });
    }
    Ok(TrainOutcome { params: best.1, history, best_epoch: best.2, train_indices: order_of_train, val_indices: val_idx })
}

/// Fraction of active nodes whose most probable action equals the label.
pub fn evaluate_accuracy(params: &PolicyParams, samples: &[DatasetSample]) -> Result<f64> {
    let rows = rows_of(samples)?;
    let flat: Vec<&Row> = rows.iter().flatten().collect();
    if flat.is_empty() {
        return Ok(0.0);
    }
    Ok(mean_loss(params, &flat)?.1)
}
