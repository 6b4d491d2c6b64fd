//! The per-step graph block: every node fuses its neighbours' information,
//! renders the fused belief as a heatmap, stacks it with position and
//! occupancy grids and runs the policy network on the result.

mod checkpoint;
mod net;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{policy_backward, policy_forward, policy_infer, Architecture, ForwardCache, PolicyParams, NORM_EPS};

use crate::error::{Error, Result};
use crate::estimation::dkf_covariance_update;
use crate::graph::{aggregate_positions, binary_map, EdgeSet, NetworkGraph};
use crate::grid::Grid;
use crate::linalg;
use crate::world::{Action, GridMap};

/// Clamp applied to the label probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Channel indices inside a [`ChannelStack`].
pub const CH_NEIGHBORS: usize = 0;
pub const CH_SELF: usize = 1;
pub const CH_HEAT: usize = 2;
pub const CH_OCCUPANCY: usize = 3;
pub const CHANNELS: usize = 4;

/// Max-normalized uncertainty image; entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatGrid(pub Grid);

impl HeatGrid {
    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

/// Sum of the per-target Gaussian densities of `N(μ, Ω̂⁻¹)` evaluated at
/// every cell centre, divided by its maximum.
pub fn heatmap_project(omega_hat: &DMatrix<f64>, mu: &DVector<f64>, map: &GridMap) -> Result<HeatGrid> {
    let dim = mu.len();
    if omega_hat.shape() != (dim, dim) || !dim.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "heatmap of a {:?} information matrix with a {dim}-vector mean",
            omega_hat.shape()
        )));
    }
    let sigma = linalg::spd_inverse(omega_hat, "fused information matrix")?;
    let mut g = Grid::zeros(map.height(), map.width());
    for k in 0..dim / 2 {
        let s = Matrix2::new(
            sigma[(2 * k, 2 * k)],
            sigma[(2 * k, 2 * k + 1)],
            sigma[(2 * k + 1, 2 * k)],
            sigma[(2 * k + 1, 2 * k + 1)],
        );
        let det = s.determinant();
        let inv = s.try_inverse().filter(|_| det > 0.0).ok_or(Error::NotPositiveDefinite("target marginal covariance"))?;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
        let centre = Vector2::new(mu[2 * k], mu[2 * k + 1]);
        for row in 0..map.height() {
            for col in 0..map.width() {
                let [x, y] = map.cell_center(crate::world::Cell::new(row, col));
                let d = Vector2::new(x, y) - centre;
                let q = d.dot(&(inv * d));
                g.data[row * map.width() + col] += norm * (-0.5 * q).exp();
            }
        }
    }
    let max = g.max();
    if max > 0.0 && max.is_finite() {
        for v in &mut g.data {
            *v /= max;
        }
    } else {
        g.data.fill(0.0);
    }
    Ok(HeatGrid(g))
}

/// Four equally-shaped grids in the order neighbours, self, heat, occupancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStack {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ChannelStack {
    pub fn channels(&self) -> usize {
        self.data.len().checked_div(self.height * self.width).unwrap_or(0)
    }

    pub fn channel(&self, c: usize) -> Grid {
        let n = self.height * self.width;
        Grid { height: self.height, width: self.width, data: self.data[c * n..(c + 1) * n].to_vec() }
    }
}

pub fn occupancy_grid(map: &GridMap) -> Grid {
    Grid {
        height: map.height(),
        width: map.width(),
        data: map.occupancy().iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
    }
}

pub fn assemble_channels(p_hat: &Grid, self_map: &Grid, heat: &HeatGrid, map: &GridMap) -> Result<ChannelStack> {
    let occ = occupancy_grid(map);
    p_hat.check_shape(&occ, "neighbour position channel")?;
    self_map.check_shape(&occ, "self position channel")?;
    heat.0.check_shape(&occ, "heat channel")?;
    let mut data = Vec::with_capacity(CHANNELS * occ.data.len());
    for g in [p_hat, self_map, &heat.0, &occ] {
        data.extend_from_slice(&g.data);
    }
    Ok(ChannelStack { height: occ.height, width: occ.width, data })
}

/// Categorical distribution over left, up, right, down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDist {
    pub probs: [f64; Action::COUNT],
}

impl ActionDist {
    pub fn uniform() -> Self {
        ActionDist { probs: [1.0 / Action::COUNT as f64; Action::COUNT] }
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        let probs: [f64; Action::COUNT] =
            p.try_into().map_err(|_| Error::Dimension(format!("{} probabilities for 4 actions", p.len())))?;
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("not a distribution: {probs:?}")));
        }
        Ok(ActionDist { probs })
    }

    pub fn prob(&self, a: Action) -> f64 {
        self.probs[a.index()]
    }
}

/// Most probable action; ties go to the earliest in left, up, right, down.
pub fn select_action(dist: &ActionDist) -> Action {
    let mut best = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > dist.probs[best] {
            best = i;
        }
    }
    Action::from_index(best).expect("four actions")
}

/// Negative log-likelihood of `label` and its gradient with respect to the
/// logits that produced `dist`.
pub fn cross_entropy(dist: &ActionDist, label: Action) -> (f64, [f64; Action::COUNT]) {
    let loss = -dist.prob(label).max(PROB_FLOOR).ln();
    let mut grad = dist.probs;
    grad[label.index()] -= 1.0;
    (loss, grad)
}

/// Everything the graph block computes for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutput {
    pub omega_hat: DMatrix<f64>,
    pub neighbor_grid: Grid,
    pub heat: HeatGrid,
    pub dist: ActionDist,
    pub action: Action,
}

/// `Φ(𝒢)`: the input topology, untouched, with a fresh attribute per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBlockOutput {
    pub edges: EdgeSet,
    pub weights: DMatrix<f64>,
    pub active: Vec<bool>,
    pub nodes: Vec<NodeOutput>,
}

/// Fused information, neighbour grid, heatmap and network input of node `i`.
pub fn node_features(graph: &NetworkGraph, i: usize) -> Result<(DMatrix<f64>, Grid, HeatGrid, ChannelStack)> {
    let map = &*graph.map;
    let order = graph.consensus_order(i);
    let omegas: Vec<&DMatrix<f64>> = order.iter().map(|&j| &graph.attributes[j].omega).collect();
    let kappas: Vec<f64> = order.iter().map(|&j| graph.weights[(i, j)]).collect();
    let own = &graph.attributes[i];
    let omega_hat = dkf_covariance_update(&omegas, &kappas, &own.z)?;
    let heat = heatmap_project(&omega_hat, &own.mu, map)?;
    let maps: Vec<Grid> = order.iter().map(|&j| binary_map(graph.attributes[j].p, map)).collect();
    let refs: Vec<&Grid> = maps.iter().collect();
    let p_hat = aggregate_positions(&refs, &maps[0])?;
    let stack = assemble_channels(&p_hat, &maps[0], &heat, map)?;
    Ok((omega_hat, p_hat, heat, stack))
}

pub fn node_update(graph: &NetworkGraph, i: usize, params: &PolicyParams) -> Result<NodeOutput> {
    let (omega_hat, neighbor_grid, heat, stack) = node_features(graph, i)?;
    let dist = policy_infer(&stack, params)?;
    Ok(NodeOutput { omega_hat, neighbor_grid, heat, dist, action: select_action(&dist) })
}

/// Applies the graph block to every node. Nodes are independent given the
/// input graph, so they run in parallel.
pub fn gblock_apply(graph: &NetworkGraph, params: &PolicyParams) -> Result<GraphBlockOutput> {
    let nodes = (0..graph.len())
        .into_par_iter()
        .map(|i| node_update(graph, i, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphBlockOutput {
        edges: graph.edges.clone(),
        weights: graph.weights.clone(),
        active: graph.active.clone(),
        nodes,
    })
}
