//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use aia_core::estimation::innovation_info;
use aia_core::graph::{build_comm_graph, weight_matrix};
use aia_core::world::{measurement_noise, selection_matrix, visible_targets};
use aia_core::{NetworkGraph, NodeAttribute, ScenarioConfig};
use nalgebra::DMatrix;

/// Desk-scale scenario with `robots` robots, every robot holding the prior
/// and the information of its own first measurement.
pub fn scenario_graph(robots: usize, seed: u64) -> NetworkGraph {
    let cfg = ScenarioConfig { robots, ..ScenarioConfig::default() };
    let inst = cfg.instantiate(seed).expect("desk-scale scenario");
    let x = &inst.hidden.x;
    let attributes = inst
        .robots
        .iter()
        .map(|&p| {
            let vis = visible_targets(p, x, &cfg.sensor, &inst.map);
            let z = innovation_info(&selection_matrix(&vis, x.len()), &measurement_noise(&vis, x, &cfg.sensor))
                .expect("diagonal noise");
            NodeAttribute { p, z, mu: inst.prior.mu.clone(), omega: inst.prior.omega.clone() }
        })
        .collect();
    let edges = build_comm_graph(&inst.robots, Some(4.0), inst.map.cell_size());
    let weights = weight_matrix(&edges);
    let n = inst.robots.len();
    NetworkGraph { attributes, edges, weights, map: Arc::clone(&inst.map), active: vec![true; n] }
}

/// Random symmetric positive definite matrix with a well-spread spectrum.
pub fn spd(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut state = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let b = DMatrix::from_fn(dim, dim, |_, _| next());
    &b * b.transpose() + DMatrix::identity(dim, dim)
}
