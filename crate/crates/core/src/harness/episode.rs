//! Closed-loop episodes: sense, communicate, fuse, act, move, predict.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::Instance;
use crate::error::{Error, Result};
use crate::estimation::{
    det_cov, dkf_update, innovation_info, kf_predict, target_block_dets, termination_check, Belief, LocalMeasurement,
};
use crate::expert::{expert_plan, greedy_decentralized, random_walker, Plan, PlanningModel};
use crate::gblock::{node_update, PolicyParams};
use crate::graph::{build_comm_graph, drop_edges_poisson, weight_matrix, NetworkGraph, NodeAttribute};
use crate::linalg;
use crate::world::{observe, step_robot, try_move, Action, Cell};

/// Decision rule driving every robot in an episode.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Centralized planner, replanning whenever the team or plan diverges.
    Expert,
    /// The learned graph block.
    Gnn(Arc<PolicyParams>),
    Random,
    Greedy,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Expert => "expert",
            Policy::Gnn(_) => "gnn",
            Policy::Random => "random",
            Policy::Greedy => "greedy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Success,
    HorizonCap,
    AllRobotsFailed,
}

/// What one robot saw and did. Index `t` of every vector is timestep `t`;
/// a failed robot's vectors stop at its failure time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotTrace {
    pub positions: Vec<Cell>,
    /// Action chosen at each step; `None` means idle.
    pub actions: Vec<Option<Action>>,
    pub det_sigma: Vec<f64>,
    pub target_dets: Vec<Vec<f64>>,
    pub terminated_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub policy: String,
    pub horizon: usize,
    pub success: bool,
    pub reason: TerminationReason,
    pub robots: Vec<RobotTrace>,
    /// `[t][k]`: smallest `det Σᵏ` over the robots still running at `t`.
    pub global_uncertainty: Vec<Vec<f64>>,
    pub edge_counts: Vec<usize>,
    pub dropped_edges: Vec<usize>,
    pub killed: Option<usize>,
}

impl EpisodeResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per robot and step:
    /// `t,robot_id,row,col,action,det_sigma,det_block_0,…`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let targets = self.global_uncertainty.first().map_or(0, Vec::len);
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["t", "robot_id", "row", "col", "action", "det_sigma"].map(String::from).to_vec();
        header.extend((0..targets).map(|k| format!("det_block_{k}")));
        out.write_record(&header)?;
        for (id, r) in self.robots.iter().enumerate() {
            for t in 0..r.det_sigma.len() {
                let action = match r.actions.get(t) {
                    Some(Some(a)) => a.name().to_string(),
                    Some(None) => "idle".to_string(),
                    None => String::new(),
                };
                let mut row = vec![
                    t.to_string(),
                    id.to_string(),
                    r.positions[t].row.to_string(),
                    r.positions[t].col.to_string(),
                    action,
                    format!("{:e}", r.det_sigma[t]),
                ];
                row.extend(r.target_dets[t].iter().map(|d| format!("{d:e}")));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Network graph and the actions taken at one step, kept for imitation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: usize,
    pub graph: NetworkGraph,
    pub actions: Vec<Option<Action>>,
}

/// Per-target sharpest marginal among `beliefs`, assembled block-diagonally.
/// Identical beliefs are returned unchanged.
pub fn team_belief(beliefs: &[&Belief]) -> Result<Belief> {
    let first = *beliefs.first().ok_or_else(|| Error::Config("no beliefs to combine".into()))?;
    if beliefs.iter().all(|b| *b == first) {
        return Ok(first.clone());
    }
    let dim = first.dim();
    let covs = beliefs.iter().map(|b| b.covariance()).collect::<Result<Vec<_>>>()?;
    let mut sigma = DMatrix::zeros(dim, dim);
    let mut mu = first.mu.clone();
    for k in 0..dim / 2 {
        let best = (0..covs.len())
            .min_by(|&a, &b| {
                crate::estimation::block_det(&covs[a], k).total_cmp(&crate::estimation::block_det(&covs[b], k))
            })
            .expect("non-empty");
        sigma.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&covs[best].view((2 * k, 2 * k), (2, 2)));
        mu.rows_mut(2 * k, 2).copy_from(&beliefs[best].mu.rows(2 * k, 2));
    }
    let omega = linalg::spd_inverse(&sigma, "team covariance")?;
    Belief::new(mu, omega)
}

struct ActivePlan {
    plan: Plan,
    robots: Vec<usize>,
    start: usize,
    expected: Vec<Vec<Cell>>,
}

/// Follows a centralized plan while it stays valid and replans otherwise.
struct ExpertController {
    model: PlanningModel,
    max_horizon: usize,
    current: Option<ActivePlan>,
    replans: usize,
}

impl ExpertController {
    fn act(&mut self, t: usize, positions: &[Cell], active: &[usize], predicted: &[Belief], updated: &[Belief]) -> Result<Vec<Option<Action>>> {
        let n = positions.len();
        let valid = self.current.as_ref().is_some_and(|c| {
            let k = t - c.start;
            c.robots == active
                && k < c.plan.horizon
                && active.iter().zip(&c.expected[k]).all(|(&i, &p)| positions[i] == p)
        });
        if !valid {
            self.current = None;
            let team = team_belief(&active.iter().map(|&i| &predicted[i]).collect::<Vec<_>>())?;
            let cells: Vec<Cell> = active.iter().map(|&i| positions[i]).collect();
            match expert_plan(&self.model, &cells, &team, self.max_horizon) {
                Ok(plan) if plan.horizon > 0 => {
                    let mut expected = vec![cells.clone()];
                    for joint in &plan.actions {
                        let last = expected.last().expect("non-empty");
                        let next = last
                            .iter()
                            .zip(joint)
                            .map(|(&p, &u)| try_move(p, u, &self.model.map).unwrap_or(p))
                            .collect();
                        expected.push(next);
                    }
                    self.replans += 1;
                    self.current = Some(ActivePlan { plan, robots: active.to_vec(), start: t, expected });
                }
                Ok(_) | Err(Error::HorizonExhausted(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let mut out = vec![None; n];
        match &self.current {
            Some(c) => {
                for (slot, &i) in active.iter().enumerate() {
                    out[i] = Some(c.plan.actions[t - c.start][slot]);
                }
            }
            None => {
                for &i in active {
                    out[i] = greedy_decentralized(&self.model.map, positions[i], &updated[i], &self.model.spec)?;
                }
            }
        }
        Ok(out)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Runs one closed-loop episode on `instance` for at most `horizon_cap`
/// steps. Failure injection (communication range, link drops, robot loss)
/// comes from the instance's configuration.
pub fn run_episode(instance: &Instance, policy: &Policy, seed: u64, horizon_cap: usize) -> Result<EpisodeResult> {
    simulate(instance, policy, seed, horizon_cap, false).map(|(r, _)| r)
}

/// [`run_episode`] that also returns the network graph and the chosen joint
/// action at every step where robots acted.
pub fn run_episode_with_snapshots(instance: &Instance, policy: &Policy, seed: u64, horizon_cap: usize) -> Result<(EpisodeResult, Vec<Snapshot>)> {
    simulate(instance, policy, seed, horizon_cap, true)
}

fn simulate(instance: &Instance, policy: &Policy, seed: u64, horizon_cap: usize, record: bool) -> Result<(EpisodeResult, Vec<Snapshot>)> {
    let cfg = &instance.config;
    let map = Arc::clone(&instance.map);
    let n = instance.robots.len();
    let targets = instance.hidden.target_count();
    let mut noise_rng = stream(seed, 1);
    let mut action_rng = stream(seed, 2);
    let mut fail_rng = stream(seed, 3);
    let mut hidden_rng = stream(seed, 4);

    let mut positions = instance.robots.clone();
    let mut hidden = instance.hidden.clone();
    let mut predicted: Vec<Belief> = vec![instance.prior.clone(); n];
    let mut alive = vec![true; n];
    let mut killed = None;
    let mut traces: Vec<RobotTrace> = (0..n)
        .map(|_| RobotTrace { positions: vec![], actions: vec![], det_sigma: vec![], target_dets: vec![], terminated_at: None })
        .collect();
    let mut global = Vec::new();
    let mut edge_counts = Vec::new();
    let mut dropped = Vec::new();
    let mut snapshots = Vec::new();
    let mut expert = ExpertController {
        model: instance.planning_model(),
        max_horizon: cfg.expert_max_horizon,
        current: None,
        replans: 0,
    };
    let fail_at = |step: usize| move |e: Error| Error::Episode { step, source: Box::new(e) };

    let mut t = 0;
    let (success, reason) = loop {
        if cfg.fail_time == Some(t) && killed.is_none() {
            let candidates: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
            if let Some(&k) = candidates.choose(&mut fail_rng) {
                alive[k] = false;
                traces[k].terminated_at = Some(t);
                killed = Some(k);
            }
        }
        let active: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();

        // Sense.
        let mut attributes = Vec::with_capacity(n);
        let mut measurements = Vec::with_capacity(n);
        for i in 0..n {
            let meas = if alive[i] {
                let obs = observe(positions[i], &hidden, &cfg.sensor, &map, &mut noise_rng);
                LocalMeasurement { m: obs.m, r: obs.r, y: obs.y }
            } else {
                LocalMeasurement::none(hidden.dim())
            };
            let z = innovation_info(&meas.m, &meas.r).map_err(fail_at(t))?;
            attributes.push(NodeAttribute { p: positions[i], z, mu: predicted[i].mu.clone(), omega: predicted[i].omega.clone() });
            measurements.push(meas);
        }

        // Communicate.
        let mut edges = build_comm_graph(&positions, cfg.r_com, map.cell_size());
        for (i, _) in alive.iter().enumerate().filter(|(_, &a)| !a) {
            edges.isolate(i);
        }
        let (edges, k_dropped) = drop_edges_poisson(&edges, cfg.edge_drop_lambda, &mut fail_rng);
        edge_counts.push(edges.edge_count());
        dropped.push(k_dropped);
        let weights = weight_matrix(&edges);
        let graph = NetworkGraph { attributes, edges, weights, map: Arc::clone(&map), active: alive.clone() };

        // Fuse.
        let mut updated = predicted.clone();
        for &i in &active {
            let order = graph.consensus_order(i);
            let nbrs: Vec<&Belief> = order.iter().map(|&j| &predicted[j]).collect();
            let kappas: Vec<f64> = order.iter().map(|&j| graph.weights[(i, j)]).collect();
            updated[i] = dkf_update(&nbrs, &kappas, &measurements[i]).map_err(fail_at(t))?;
        }

        let mut per_target = vec![f64::INFINITY; targets];
        for &i in &active {
            let dets = target_block_dets(&updated[i]).map_err(fail_at(t))?;
            for (g, d) in per_target.iter_mut().zip(&dets) {
                *g = g.min(*d);
            }
            let tr = &mut traces[i];
            tr.positions.push(positions[i]);
            tr.det_sigma.push(det_cov(&updated[i]).map_err(fail_at(t))?);
            tr.target_dets.push(dets);
        }
        global.push(if active.is_empty() { Vec::new() } else { per_target });

        if active.is_empty() {
            break (false, TerminationReason::AllRobotsFailed);
        }
        let beliefs: Vec<&Belief> = active.iter().map(|&i| &updated[i]).collect();
        if termination_check(&beliefs, cfg.eps, targets, cfg.termination).map_err(fail_at(t))? {
            break (true, TerminationReason::Success);
        }
        if t >= horizon_cap {
            break (false, TerminationReason::HorizonCap);
        }

        // Act.
        let actions: Vec<Option<Action>> = match policy {
            Policy::Expert => expert.act(t, &positions, &active, &predicted, &updated).map_err(fail_at(t))?,
            Policy::Random => (0..n).map(|i| if alive[i] { random_walker(&map, positions[i], &mut action_rng) } else { None }).collect(),
            Policy::Greedy => (0..n)
                .map(|i| if alive[i] { greedy_decentralized(&map, positions[i], &updated[i], &cfg.sensor) } else { Ok(None) })
                .collect::<Result<_>>()
                .map_err(fail_at(t))?,
            Policy::Gnn(params) => (0..n)
                .map(|i| if alive[i] { node_update(&graph, i, params).map(|o| Some(o.action)) } else { Ok(None) })
                .collect::<Result<_>>()
                .map_err(fail_at(t))?,
        };
        if record {
            snapshots.push(Snapshot { t, graph, actions: actions.clone() });
        }

        // Move, evolve, predict.
        for &i in &active {
            traces[i].actions.push(actions[i]);
            if let Some(u) = actions[i] {
                positions[i] = step_robot(positions[i], u, &map, &mut action_rng);
            }
        }
        if !hidden.is_static() {
            hidden = hidden.step_hidden(&mut hidden_rng);
        }
        for &i in &active {
            predicted[i] = kf_predict(&updated[i], &hidden.a, &hidden.q).map_err(fail_at(t))?;
        }
        t += 1;
    };
    if expert.replans > 1 {
        log::debug!("expert replanned {} times", expert.replans);
    }
    let result = EpisodeResult {
        policy: policy.name().to_string(),
        horizon: t,
        success,
        reason,
        robots: traces,
        global_uncertainty: global,
        edge_counts,
        dropped_edges: dropped,
        killed,
    };
    Ok((result, snapshots))
}
