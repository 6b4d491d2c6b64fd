//! Scenario configuration and instance sampling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{Belief, TerminationMode};
use crate::expert::PlanningModel;
use crate::world::{generate_environment, Cell, GridMap, HiddenState, SensorSpec};

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Target motion model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dynamics {
    #[default]
    Static,
    /// `A = I`, `Q = σ²·I`.
    RandomWalk { sigma: f64 },
}

impl Dynamics {
    pub fn matrices(&self, dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let q = match *self {
            Dynamics::Static => 0.0,
            Dynamics::RandomWalk { sigma } => sigma * sigma,
        };
        (DMatrix::identity(dim, dim), DMatrix::identity(dim, dim) * q)
    }
}

/// Everything needed to sample an instance and run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub height: usize,
    pub width: usize,
    /// Meters per cell.
    pub cell_size: f64,
    pub obstacle_count: usize,
    /// Fixed map as rows of `.` (free) and `#` (obstacle); overrides the
    /// generator.
    pub layout: Option<Vec<String>>,
    pub robots: usize,
    pub targets: usize,
    pub robot_cells: Option<Vec<Cell>>,
    pub target_cells: Option<Vec<Cell>>,
    /// Minimum robot-to-target distance (meters) for random placement.
    pub min_target_distance: f64,
    pub dynamics: Dynamics,
    pub sensor: SensorSpec,
    pub eps: f64,
    pub termination: TerminationMode,
    /// Communication range in meters; `None` is all-to-all.
    pub r_com: Option<f64>,
    pub prior_sigma: f64,
    /// Standard deviation (meters) of the error in the prior mean.
    pub prior_mean_offset: f64,
    /// Episode length cap for the expert's own run.
    pub horizon_cap: usize,
    pub expert_max_horizon: usize,
    pub edge_drop_lambda: f64,
    pub fail_time: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            height: 20,
            width: 20,
            cell_size: 0.5,
            obstacle_count: 4,
            layout: None,
            robots: 2,
            targets: 2,
            robot_cells: None,
            target_cells: None,
            min_target_distance: 0.0,
            dynamics: Dynamics::Static,
            sensor: SensorSpec { r_sense: 1.0, noise_scale: 0.05, occlusion: true },
            eps: 0.1,
            termination: TerminationMode::PerTarget,
            r_com: None,
            prior_sigma: 1.0,
            prior_mean_offset: 0.0,
            horizon_cap: 100,
            expert_max_horizon: 60,
            edge_drop_lambda: 0.0,
            fail_time: None,
        }
    }
}

impl ScenarioConfig {
    /// A 3×24 corridor, three robots on the left, two targets on the right,
    /// distance-limited links with random drops and one robot lost at t = 10.
    pub fn robustness() -> Self {
        let mut layout = vec![".".repeat(24); 3];
        layout[0].replace_range(12..13, "#");
        ScenarioConfig {
            height: 3,
            width: 24,
            layout: Some(layout),
            robots: 3,
            targets: 2,
            robot_cells: Some(vec![Cell::new(0, 0), Cell::new(1, 0), Cell::new(2, 0)]),
            target_cells: Some(vec![Cell::new(0, 22), Cell::new(2, 20)]),
            r_com: Some(4.0),
            edge_drop_lambda: 1.0,
            fail_time: Some(10),
            horizon_cap: 100,
            expert_max_horizon: 60,
            ..ScenarioConfig::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ScenarioConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.robots == 0 || self.targets == 0 {
            return bad("need at least one robot and one target".into());
        }
        if !(self.cell_size > 0.0) || !(self.eps > 0.0) || !(self.prior_sigma > 0.0) {
            return bad("cell_size, eps and prior_sigma must be positive".into());
        }
        if !(self.prior_mean_offset >= 0.0) || !(self.edge_drop_lambda >= 0.0) || !(self.min_target_distance >= 0.0) {
            return bad("offsets, distances and rates must be nonnegative".into());
        }
        if let Some(r) = self.r_com {
            if !(r >= 0.0) {
                return bad(format!("r_com must be nonnegative, got {r}"));
            }
        }
        if let Dynamics::RandomWalk { sigma } = self.dynamics {
            if !(sigma >= 0.0) {
                return bad(format!("random-walk sigma must be nonnegative, got {sigma}"));
            }
        }
        if matches!(&self.robot_cells, Some(c) if c.len() != self.robots) {
            return bad("robot_cells length differs from robots".into());
        }
        if matches!(&self.target_cells, Some(c) if c.len() != self.targets) {
            return bad("target_cells length differs from targets".into());
        }
        Ok(())
    }

    pub fn build_map(&self, seed: u64) -> Result<GridMap> {
        match &self.layout {
            Some(rows) => GridMap::from_ascii(rows, self.cell_size),
            None => generate_environment(seed, self.height, self.width, self.obstacle_count, self.cell_size),
        }
    }

    /// Samples map, robot cells, target positions and the prior.
    pub fn instantiate(&self, seed: u64) -> Result<Instance> {
        self.validate()?;
        let map = self.build_map(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let free = map.free_cells();
        let check = |cells: &[Cell], what: &'static str| -> Result<()> {
            for &c in cells {
                if !map.is_free(c) {
                    return Err(Error::Placement { what, reason: format!("{c} is not a free cell") });
                }
            }
            Ok(())
        };

        let robots = match &self.robot_cells {
            Some(c) => {
                check(c, "robot")?;
                c.clone()
            }
            None => {
                if free.len() < self.robots {
                    return Err(Error::Placement { what: "robot", reason: "not enough free cells".into() });
                }
                let mut pool = free.clone();
                pool.shuffle(&mut rng);
                pool.truncate(self.robots);
                pool
            }
        };
        let targets = match &self.target_cells {
            Some(c) => {
                check(c, "target")?;
                c.clone()
            }
            None => self.place_targets(&map, &free, &robots, &mut rng)?,
        };

        let truth: Vec<f64> = targets.iter().flat_map(|&c| map.cell_center(c)).collect();
        let dim = truth.len();
        let (a, q) = self.dynamics.matrices(dim);
        let x = DVector::from_vec(truth);
        let hidden = HiddenState::new(x.clone(), a, q)?;
        let mut mu = x;
        if self.prior_mean_offset > 0.0 {
            for v in mu.iter_mut() {
                *v += self.prior_mean_offset * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let prior = Belief::isotropic(mu, self.prior_sigma)?;
        Ok(Instance { config: self.clone(), seed, map: Arc::new(map), robots, targets, hidden, prior })
    }

    fn place_targets(&self, map: &GridMap, free: &[Cell], robots: &[Cell], rng: &mut ChaCha8Rng) -> Result<Vec<Cell>> {
        let mut targets = Vec::with_capacity(self.targets);
        for _ in 0..PLACEMENT_ATTEMPTS {
            if targets.len() == self.targets {
                break;
            }
            let c = free[rng.random_range(0..free.len())];
            if robots.contains(&c) || targets.contains(&c) {
                continue;
            }
            if robots.iter().all(|&r| map.distance(r, c) >= self.min_target_distance) {
                targets.push(c);
            }
        }
        if targets.len() < self.targets {
            return Err(Error::Placement {
                what: "target",
                reason: format!(
                    "found {} of {} cells at least {} m from every robot",
                    targets.len(),
                    self.targets,
                    self.min_target_distance
                ),
            });
        }
        Ok(targets)
    }
}

/// One concrete episode setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub map: Arc<GridMap>,
    pub robots: Vec<Cell>,
    pub targets: Vec<Cell>,
    pub hidden: HiddenState,
    pub prior: Belief,
}

impl Instance {
    pub fn planning_model(&self) -> PlanningModel {
        PlanningModel {
            map: Arc::clone(&self.map),
            spec: self.config.sensor,
            a: self.hidden.a.clone(),
            q: self.hidden.q.clone(),
            eps: self.config.eps,
            mode: self.config.termination,
        }
    }
}
