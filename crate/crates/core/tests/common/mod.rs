//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use aia_core::estimation::{det_cov, Belief, InnovationInfo};
use aia_core::expert::PlanningModel;
use aia_core::gblock::{cross_entropy, policy_forward, ChannelStack};
use aia_core::graph::weight_matrix;
use aia_core::{Action, Cell, EdgeSet, GridMap, NetworkGraph, NodeAttribute, PolicyParams};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_stack(h: usize, w: usize, seed: u64) -> ChannelStack {
    let mut r = rng(seed);
    ChannelStack { height: h, width: w, data: (0..4 * h * w).map(|_| r.random_range(-1.0..1.0)).collect() }
}

pub fn ce_loss(stack: &ChannelStack, params: &PolicyParams, label: Action) -> f64 {
    let (dist, _) = policy_forward(stack, params).unwrap();
    cross_entropy(&dist, label).0
}

/// Central differences of the cross-entropy loss for every parameter.
pub fn finite_difference_grad(stack: &ChannelStack, params: &PolicyParams, label: Action, h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|k| {
            let v = p.values[k];
            p.values[k] = v + h;
            let up = ce_loss(stack, &p, label);
            p.values[k] = v - h;
            let down = ce_loss(stack, &p, label);
            p.values[k] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn random_spd(r: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(dim, dim, |_, _| r.random_range(-1.0..1.0));
    let scale = r.random_range(0.2..5.0);
    (&b * b.transpose() + DMatrix::identity(dim, dim) * 0.5) * scale
}

/// Random graph: self-loops plus each directed edge with probability 1/2,
/// random SPD information, PSD innovations and free positions.
pub fn random_graph(r: &mut ChaCha8Rng, n: usize, map: &Arc<GridMap>, dim: usize) -> NetworkGraph {
    let free = map.free_cells();
    let (w, h) = (map.width() as f64 * map.cell_size(), map.height() as f64 * map.cell_size());
    let attributes = (0..n)
        .map(|_| {
            let p = free[r.random_range(0..free.len())];
            let mu = DVector::from_fn(dim, |i, _| if i % 2 == 0 { r.random_range(0.0..w) } else { r.random_range(0.0..h) });
            let c = DMatrix::from_fn(dim, 2, |_, _| if r.random_bool(0.5) { r.random_range(-3.0..3.0) } else { 0.0 });
            let z = InnovationInfo(&c * c.transpose());
            NodeAttribute { p, z, mu, omega: random_spd(r, dim) }
        })
        .collect();
    let adj = (0..n * n).map(|k| k % (n + 1) == 0 || r.random_bool(0.5)).collect();
    let edges = EdgeSet::from_adjacency(n, adj).unwrap();
    let weights = weight_matrix(&edges);
    NetworkGraph { attributes, edges, weights, map: Arc::clone(map), active: vec![true; n] }
}

pub fn random_permutation(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

fn all_joint_actions(n: usize) -> Vec<Vec<Action>> {
    (0..4usize.pow(n as u32))
        .map(|code| (0..n).map(|i| Action::from_index((code >> (2 * i)) & 3).unwrap()).collect())
        .collect()
}

/// Minimum cost over every joint-action sequence of length ≤ `max_depth`
/// that ends at its first goal step, found by depth-first enumeration.
/// Branches already costlier than the best complete sequence are cut, which
/// cannot change the minimum because step costs are nonnegative.
pub fn exhaustive_min_cost(model: &PlanningModel, robots: &[Cell], prior: &Belief, max_depth: usize) -> Option<f64> {
    let start = model.initial(prior, robots).unwrap();
    if model.is_goal(&start).unwrap() {
        return Some(0.0);
    }
    let joints = all_joint_actions(robots.len());
    let mut best: Option<f64> = None;
    enumerate(model, robots, &start, 0, 0.0, max_depth, &joints, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    model: &PlanningModel,
    positions: &[Cell],
    belief: &Belief,
    depth: usize,
    cost: f64,
    max_depth: usize,
    joints: &[Vec<Action>],
    best: &mut Option<f64>,
) {
    for joint in joints {
        let Some((next, b)) = model.step(belief, positions, joint).unwrap() else {
            continue;
        };
        let c = cost + det_cov(&b).unwrap();
        if best.is_some_and(|v| c > v) {
            continue;
        }
        if model.is_goal(&b).unwrap() {
            *best = Some(best.map_or(c, |v| v.min(c)));
        } else if depth + 1 < max_depth {
            enumerate(model, &next, &b, depth + 1, c, max_depth, joints, best);
        }
    }
}

/// Covariance-form Kalman filter, independent of the information-form code.
pub struct CovarianceKf {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl CovarianceKf {
    pub fn predict(&mut self, a: &DMatrix<f64>, q: &DMatrix<f64>) {
        self.mu = a * &self.mu;
        self.sigma = a * &self.sigma * a.transpose() + q;
    }

    /// Joseph-form update.
    pub fn update(&mut self, m: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) {
        if m.nrows() == 0 {
            return;
        }
        let s = m * &self.sigma * m.transpose() + r;
        let k = &self.sigma * m.transpose() * s.try_inverse().unwrap();
        self.mu = &self.mu + &k * (y - m * &self.mu);
        let i_km = DMatrix::identity(self.mu.len(), self.mu.len()) - &k * m;
        self.sigma = &i_km * &self.sigma * i_km.transpose() + &k * r * k.transpose();
    }
}

pub fn rel_diff_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_diff_vector(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
