//! Centralized expert planner and the two baseline policies.
//!
//! The expert runs a best-first (uniform-cost) search over joint actions.
//! Under linear-Gaussian models the covariance sequence does not depend on
//! the realized measurements, so every search node carries a deterministic
//! belief and the objective `J = Σₜ det Σₜ` is known exactly along each
//! branch.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{det_cov, innovation_info, kf_predict, termination_check, Belief, TerminationMode};
use crate::linalg;
use crate::world::{free_actions, measurement_noise, selection_matrix, try_move, visible_targets, Action, Cell, GridMap, SensorSpec};

/// Everything the planner needs to roll a belief forward without sampling.
#[derive(Debug, Clone)]
pub struct PlanningModel {
    pub map: Arc<GridMap>,
    pub spec: SensorSpec,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub eps: f64,
    pub mode: TerminationMode,
}

impl PlanningModel {
    pub fn static_targets(map: Arc<GridMap>, spec: SensorSpec, dim: usize, eps: f64) -> Self {
        PlanningModel {
            map,
            spec,
            a: DMatrix::identity(dim, dim),
            q: DMatrix::zeros(dim, dim),
            eps,
            mode: TerminationMode::PerTarget,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn targets(&self) -> usize {
        self.dim() / 2
    }

    fn is_static(&self) -> bool {
        self.q.iter().all(|&v| v == 0.0) && self.a == DMatrix::identity(self.dim(), self.dim())
    }

    /// `Σᵢ Zᵢ` for robots at `positions`, with visibility and noise taken at
    /// the belief mean. Terms are added in sorted-position order so the sum
    /// does not depend on robot numbering. `None` when nothing is visible.
    pub fn team_information(&self, positions: &[Cell], mu: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let mut sorted = positions.to_vec();
        sorted.sort();
        let mut total: Option<DMatrix<f64>> = None;
        for p in sorted {
            let vis = visible_targets(p, mu, &self.spec, &self.map);
            if vis.is_empty() {
                continue;
            }
            let z = innovation_info(&selection_matrix(&vis, mu.len()), &measurement_noise(&vis, mu, &self.spec))?;
            match &mut total {
                Some(t) => *t += z.0,
                None => total = Some(z.0),
            }
        }
        Ok(total)
    }

    fn absorb(&self, belief: &Belief, positions: &[Cell]) -> Result<Option<Belief>> {
        Ok(self.team_information(positions, &belief.mu)?.map(|z| {
            let mut omega = &belief.omega + z;
            linalg::symmetrize(&mut omega);
            Belief { mu: belief.mu.clone(), omega }
        }))
    }

    /// Belief after the team senses at its starting cells.
    pub fn initial(&self, prior: &Belief, positions: &[Cell]) -> Result<Belief> {
        Ok(self.absorb(prior, positions)?.unwrap_or_else(|| prior.clone()))
    }

    /// One planning step: move every robot, predict, then add the team's
    /// information at the new cells. `None` if some move is blocked.
    pub fn step(&self, belief: &Belief, positions: &[Cell], joint: &[Action]) -> Result<Option<(Vec<Cell>, Belief)>> {
        let mut next = Vec::with_capacity(positions.len());
        for (&p, &u) in positions.iter().zip(joint) {
            match try_move(p, u, &self.map) {
                Some(c) => next.push(c),
                None => return Ok(None),
            }
        }
        let predicted = kf_predict(belief, &self.a, &self.q)?;
        let updated = self.absorb(&predicted, &next)?.unwrap_or(predicted);
        Ok(Some((next, updated)))
    }

    pub fn is_goal(&self, belief: &Belief) -> Result<bool> {
        termination_check(&[belief], self.eps, self.targets(), self.mode)
    }
}

/// Minimum-cost joint action sequence reaching the uncertainty threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub horizon: usize,
    /// `actions[t][i]`: move of robot `i` at step `t`.
    pub actions: Vec<Vec<Action>>,
    pub cost: f64,
    /// `det Σₜ` for `t = 0..=horizon`.
    pub det_trace: Vec<f64>,
}

impl Plan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Plan> {
        Ok(serde_json::from_str(s)?)
    }
}

struct Node {
    positions: Vec<Cell>,
    belief: Rc<Belief>,
    t: usize,
    cost: f64,
    det: f64,
    parent: Option<usize>,
    joint: Vec<Action>,
}

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    seq: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Max-heap: lower cost first, then earlier insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn joint_actions(n: usize) -> Vec<Vec<Action>> {
    let mut all = vec![Vec::with_capacity(n)];
    for _ in 0..n {
        all = all
            .into_iter()
            .flat_map(|prefix| {
                Action::ALL.iter().map(move |&a| {
                    let mut v = prefix.clone();
                    v.push(a);
                    v
                })
            })
            .collect();
    }
    all
}

/// Does `a` (cost, time, information) make `b` redundant? Any continuation
/// of `b` applied to `a` ends no later and no more expensive.
fn dominates(model_static: bool, a: &Node, b: &Node) -> bool {
    let time_ok = if model_static { a.t <= b.t } else { a.t == b.t };
    time_ok && a.cost <= b.cost && linalg::loewner_geq(&a.belief.omega, &b.belief.omega)
}

/// Uniform-cost search over joint actions from a prior belief. The team
/// senses at `robots` before the first move; the returned plan ends at the
/// first step whose belief meets the threshold.
pub fn expert_plan(model: &PlanningModel, robots: &[Cell], prior: &Belief, max_horizon: usize) -> Result<Plan> {
    if !(model.eps > 0.0) {
        return Err(Error::Config(format!("threshold must be positive, got {}", model.eps)));
    }
    if prior.dim() != model.dim() {
        return Err(Error::Dimension(format!("belief dimension {} for model dimension {}", prior.dim(), model.dim())));
    }
    if let Some(p) = robots.iter().find(|&&p| !model.map.is_free(p)) {
        return Err(Error::Placement { what: "robot", reason: format!("{p} is not a free cell") });
    }
    let is_static = model.is_static();
    let start = model.initial(prior, robots)?;
    let start_det = det_cov(&start)?;
    let mut nodes = vec![Node {
        positions: robots.to_vec(),
        belief: Rc::new(start),
        t: 0,
        cost: 0.0,
        det: start_det,
        parent: None,
        joint: Vec::new(),
    }];
    let mut dead = vec![false];
    let mut frontier: HashMap<Vec<Cell>, Vec<usize>> = HashMap::new();
    frontier.insert(sorted(robots), vec![0]);
    let mut heap = BinaryHeap::from([Entry { cost: 0.0, seq: 0 }]);
    let joints = joint_actions(robots.len());

    while let Some(Entry { seq: id, .. }) = heap.pop() {
        if dead[id] {
            continue;
        }
        if model.is_goal(&nodes[id].belief)? {
            return Ok(extract(&nodes, id));
        }
        if nodes[id].t >= max_horizon {
            continue;
        }
        for joint in &joints {
            let parent = &nodes[id];
            let mut next = Vec::with_capacity(robots.len());
            if parent.positions.iter().zip(joint).any(|(&p, &u)| match try_move(p, u, &model.map) {
                Some(c) => {
                    next.push(c);
                    false
                }
                None => true,
            }) {
                continue;
            }
            let predicted = if is_static {
                None
            } else {
                Some(kf_predict(&parent.belief, &model.a, &model.q)?)
            };
            let base: &Belief = predicted.as_ref().unwrap_or(&parent.belief);
            let (belief, det) = match model.absorb(base, &next)? {
                Some(b) => {
                    let d = det_cov(&b)?;
                    (Rc::new(b), d)
                }
                None if is_static => (Rc::clone(&parent.belief), parent.det),
                None => {
                    let b = predicted.expect("dynamic prediction");
                    let d = det_cov(&b)?;
                    (Rc::new(b), d)
                }
            };
            let child = Node {
                positions: next,
                belief,
                t: parent.t + 1,
                cost: parent.cost + det,
                det,
                parent: Some(id),
                joint: joint.clone(),
            };
            let bucket = frontier.entry(sorted(&child.positions)).or_default();
            if bucket.iter().any(|&o| dominates(is_static, &nodes[o], &child)) {
                continue;
            }
            bucket.retain(|&o| {
                let gone = dominates(is_static, &child, &nodes[o]);
                if gone {
                    dead[o] = true;
                }
                !gone
            });
            let cid = nodes.len();
            bucket.push(cid);
            heap.push(Entry { cost: child.cost, seq: cid });
            nodes.push(child);
            dead.push(false);
        }
    }
    Err(Error::HorizonExhausted(max_horizon))
}

fn sorted(p: &[Cell]) -> Vec<Cell> {
    let mut v = p.to_vec();
    v.sort();
    v
}

fn extract(nodes: &[Node], goal: usize) -> Plan {
    let mut chain = vec![goal];
    while let Some(p) = nodes[*chain.last().expect("non-empty")].parent {
        chain.push(p);
    }
    chain.reverse();
    Plan {
        horizon: nodes[goal].t,
        actions: chain[1..].iter().map(|&i| nodes[i].joint.clone()).collect(),
        cost: nodes[goal].cost,
        det_trace: chain.iter().map(|&i| nodes[i].det).collect(),
    }
}

/// Replays `plan` through the planning model, returning the reached
/// positions, beliefs and accumulated cost.
pub fn replay_plan(model: &PlanningModel, robots: &[Cell], prior: &Belief, plan: &Plan) -> Result<(Vec<Vec<Cell>>, Vec<Belief>, f64)> {
    let mut positions = vec![robots.to_vec()];
    let mut beliefs = vec![model.initial(prior, robots)?];
    let mut cost = 0.0;
    for joint in &plan.actions {
        let (p, b) = model
            .step(beliefs.last().expect("non-empty"), positions.last().expect("non-empty"), joint)?
            .ok_or_else(|| Error::Config("plan moves a robot into an obstacle".into()))?;
        cost += det_cov(&b)?;
        positions.push(p);
        beliefs.push(b);
    }
    Ok((positions, beliefs, cost))
}

/// Uniform choice among collision-free moves; `None` (idle) when walled in.
pub fn random_walker<R: Rng + ?Sized>(map: &GridMap, robot: Cell, rng: &mut R) -> Option<Action> {
    free_actions(robot, map).choose(rng).copied()
}

/// One-step lookahead on the robot's own belief: the free move whose
/// measurement leaves the smallest `det Σ`. Ties go to the earliest action.
/// A stand-in for a decentralized sampling-based planner.
pub fn greedy_decentralized(map: &GridMap, robot: Cell, belief: &Belief, spec: &SensorSpec) -> Result<Option<Action>> {
    let mut best: Option<(Action, f64)> = None;
    for u in free_actions(robot, map) {
        let cell = try_move(robot, u, map).expect("free action");
        let vis = visible_targets(cell, &belief.mu, spec, map);
        let det = if vis.is_empty() {
            det_cov(belief)?
        } else {
            let z = innovation_info(&selection_matrix(&vis, belief.dim()), &measurement_noise(&vis, &belief.mu, spec))?;
            let mut omega = &belief.omega + z.0;
            linalg::symmetrize(&mut omega);
            1.0 / linalg::spd_det(&omega, "lookahead information")?
        };
        if best.is_none_or(|(_, d)| det < d) {
            best = Some((u, det));
        }
    }
    Ok(best.map(|(u, _)| u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(map: GridMap, r_sense: f64, dim: usize) -> PlanningModel {
        let spec = SensorSpec { r_sense, noise_scale: 0.05, occlusion: true };
        PlanningModel::static_targets(Arc::new(map), spec, dim, 0.1)
    }

    fn prior_at(map: &GridMap, targets: &[Cell]) -> Belief {
        let mu: Vec<f64> = targets.iter().flat_map(|&c| map.cell_center(c)).collect();
        Belief::isotropic(DVector::from_vec(mu), 1.0).unwrap()
    }

    #[test]
    fn satisfied_start_needs_no_plan() {
        let map = GridMap::open(5, 5, 0.5).unwrap();
        let m = model(map.clone(), 1.0, 2);
        let prior = prior_at(&map, &[Cell::new(2, 2)]);
        let plan = expert_plan(&m, &[Cell::new(2, 3)], &prior, 4).unwrap();
        assert_eq!(plan.horizon, 0);
        assert!(plan.actions.is_empty());
        assert_eq!(plan.cost, 0.0);
        assert_eq!(plan.det_trace.len(), 1);
    }

    #[test]
    fn walks_towards_target() {
        let map = GridMap::open(5, 7, 0.5).unwrap();
        let m = model(map.clone(), 0.5, 2);
        let prior = prior_at(&map, &[Cell::new(2, 5)]);
        let plan = expert_plan(&m, &[Cell::new(2, 1)], &prior, 6).unwrap();
        assert_eq!(plan.horizon, 3);
        assert!(plan.actions.iter().all(|j| j == &vec![Action::Right]));
        let (_, _, cost) = replay_plan(&m, &[Cell::new(2, 1)], &prior, &plan).unwrap();
        assert_eq!(cost, plan.cost);
    }

    #[test]
    fn exhausted_horizon_is_reported() {
        let map = GridMap::open(3, 9, 0.5).unwrap();
        let m = model(map.clone(), 0.5, 2);
        let prior = prior_at(&map, &[Cell::new(1, 8)]);
        assert!(matches!(
            expert_plan(&m, &[Cell::new(1, 0)], &prior, 3),
            Err(Error::HorizonExhausted(3))
        ));
    }

    #[test]
    fn plan_json_round_trip() {
        let map = GridMap::open(5, 7, 0.5).unwrap();
        let m = model(map.clone(), 0.5, 2);
        let prior = prior_at(&map, &[Cell::new(0, 6)]);
        let plan = expert_plan(&m, &[Cell::new(4, 0)], &prior, 12).unwrap();
        assert_eq!(Plan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
    }

    #[test]
    fn walled_in_walker_idles() {
        let map = GridMap::from_ascii(&[".#.", "#.#", ".#."], 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_walker(&map, Cell::new(1, 1), &mut rng), None);
    }

    #[test]
    fn greedy_moves_into_range() {
        let map = GridMap::open(5, 5, 0.5).unwrap();
        let spec = SensorSpec { r_sense: 0.5, noise_scale: 0.05, occlusion: true };
        let belief = prior_at(&map, &[Cell::new(2, 4)]);
        assert_eq!(greedy_decentralized(&map, Cell::new(2, 2), &belief, &spec).unwrap(), Some(Action::Right));
        // Target out of reach of every move: first free action wins.
        let far = prior_at(&map, &[Cell::new(0, 0)]);
        assert_eq!(greedy_decentralized(&map, Cell::new(4, 4), &far, &spec).unwrap(), Some(Action::Left));
    }
}
