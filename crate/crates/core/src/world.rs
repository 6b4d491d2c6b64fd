//! Grid world: occupancy maps, robot kinematics, the hidden target process
//! and the range/visibility sensing model.
//!
//! Conventions: cells are addressed `(row, col)` with row 0 at the top. Metric
//! coordinates put `x` along columns and `y` along rows, so the center of cell
//! `(r, c)` sits at `((c + 0.5)·s, (r + 0.5)·s)` for cell size `s`. The hidden
//! state stacks target positions as `[x₁, y₁, x₂, y₂, …]`.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retry budget for [`generate_environment`].
pub const GENERATION_ATTEMPTS: usize = 1000;

/// Floor on per-component measurement variance so `R` stays invertible.
pub const MIN_NOISE_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

/// A robot's state is its grid cell.
pub type RobotState = Cell;

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

impl From<(usize, usize)> for Cell {
    fn from((row, col): (usize, usize)) -> Self {
        Cell { row, col }
    }
}

impl From<Cell> for (usize, usize) {
    fn from(c: Cell) -> Self {
        (c.row, c.col)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Admissible control inputs, in their fixed index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Left,
    Up,
    Right,
    Down,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Up, Action::Right, Action::Down];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "left",
            Action::Up => "up",
            Action::Right => "right",
            Action::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == s)
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Left => (0, -1),
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    height: usize,
    width: usize,
    cell_size: f64,
    /// Row-major, `true` marks an obstacle.
    occupancy: Vec<bool>,
}

impl GridMap {
    pub fn new(height: usize, width: usize, cell_size: f64, occupancy: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {height}x{width}")));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
        }
        if occupancy.len() != height * width {
            return Err(Error::Dimension(format!(
                "occupancy has {} cells, expected {}",
                occupancy.len(),
                height * width
            )));
        }
        if occupancy.iter().all(|&o| o) {
            return Err(Error::Config("grid has no free cell".into()));
        }
        Ok(GridMap { height, width, cell_size, occupancy })
    }

    pub fn open(height: usize, width: usize, cell_size: f64) -> Result<Self> {
        GridMap::new(height, width, cell_size, vec![false; height * width])
    }

    /// Parses rows of `#` (obstacle) and anything else (free).
    pub fn from_ascii<S: AsRef<str>>(rows: &[S], cell_size: f64) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map(|r| r.as_ref().chars().count()).unwrap_or(0);
        let mut occupancy = Vec::with_capacity(height * width);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != width {
                return Err(Error::Dimension(format!("layout row {i} has a different width")));
            }
            occupancy.extend(row.chars().map(|ch| ch == '#'));
        }
        GridMap::new(height, width, cell_size, occupancy)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        self.contains(cell) && !self.occupancy[self.index(cell)]
    }

    pub fn is_obstacle(&self, cell: Cell) -> bool {
        self.contains(cell) && self.occupancy[self.index(cell)]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Cell::new(r, c)))
            .filter(|&c| self.is_free(c))
            .collect()
    }

    /// Metric coordinates `(x, y)` of a cell center.
    pub fn cell_center(&self, cell: Cell) -> [f64; 2] {
        [
            (cell.col as f64 + 0.5) * self.cell_size,
            (cell.row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Cell containing a metric point, clamped onto the grid.
    pub fn cell_of_point(&self, x: f64, y: f64) -> Cell {
        let clamp = |v: f64, n: usize| -> usize {
            if !(v >= 0.0) {
                0
            } else {
                ((v / self.cell_size).floor() as usize).min(n - 1)
            }
        };
        Cell::new(clamp(y, self.height), clamp(x, self.width))
    }

    pub fn distance(&self, a: Cell, b: Cell) -> f64 {
        let pa = self.cell_center(a);
        let pb = self.cell_center(b);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }

    fn free_region_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&start) = free.first() else { return false };
        let mut seen = vec![false; self.occupancy.len()];
        let mut queue = VecDeque::from([start]);
        seen[self.index(start)] = true;
        let mut count = 1;
        while let Some(c) = queue.pop_front() {
            for a in Action::ALL {
                if let Some(n) = try_move(c, a, self) {
                    let i = self.index(n);
                    if !seen[i] {
                        seen[i] = true;
                        count += 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        count == free.len()
    }
}

/// Random environment with `obstacle_count` axis-aligned rectangular blobs.
///
/// Blobs never touch each other, not even diagonally, so the obstacle layout
/// has exactly `obstacle_count` 8-connected components. Layouts whose free
/// region is not 4-connected are rejected and redrawn.
pub fn generate_environment(
    seed: u64,
    height: usize,
    width: usize,
    obstacle_count: usize,
    cell_size: f64,
) -> Result<GridMap> {
    if obstacle_count == 0 {
        return GridMap::open(height, width, cell_size);
    }
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("grid must be at least 1x1, got {height}x{width}")));
    }
    if obstacle_count >= height * width {
        return Err(Error::Config(format!(
            "{obstacle_count} obstacles leave no free cell on a {height}x{width} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_side = (height.min(width) / 5).max(1);
    'attempt: for _ in 0..GENERATION_ATTEMPTS {
        let mut occupancy = vec![false; height * width];
        let mut blobs: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(obstacle_count);
        for _ in 0..obstacle_count {
            let mut placed = false;
            for _ in 0..200 {
                let bh = rng.random_range(1..=max_side.min(height));
                let bw = rng.random_range(1..=max_side.min(width));
                let r0 = rng.random_range(0..=height - bh);
                let c0 = rng.random_range(0..=width - bw);
                // Chebyshev gap of at least one free cell to every other blob.
                let clear = blobs.iter().all(|&(r, c, h, w)| {
                    r0 > r + h || r > r0 + bh || c0 > c + w || c > c0 + bw
                });
                if clear {
                    blobs.push((r0, c0, bh, bw));
                    for r in r0..r0 + bh {
                        for c in c0..c0 + bw {
                            occupancy[r * width + c] = true;
                        }
                    }
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }
        if occupancy.iter().all(|&o| o) {
            continue;
        }
        let map = GridMap { height, width, cell_size, occupancy };
        if map.free_region_connected() {
            return Ok(map);
        }
    }
    Err(Error::EnvironmentGeneration(GENERATION_ATTEMPTS))
}

/// Moves one cell if the destination is inside the grid and free.
pub fn try_move(p: Cell, u: Action, map: &GridMap) -> Option<Cell> {
    let (dr, dc) = u.delta();
    let row = p.row.checked_add_signed(dr)?;
    let col = p.col.checked_add_signed(dc)?;
    let next = Cell::new(row, col);
    map.is_free(next).then_some(next)
}

pub fn free_actions(p: Cell, map: &GridMap) -> Vec<Action> {
    Action::ALL.into_iter().filter(|&a| try_move(p, a, map).is_some()).collect()
}

/// Robot kinematics with the random collision-free fallback: an invalid
/// action is replaced by a uniformly drawn valid one, and a walled-in robot
/// stays where it is.
pub fn step_robot<R: Rng + ?Sized>(p: Cell, u: Action, map: &GridMap, rng: &mut R) -> Cell {
    if let Some(next) = try_move(p, u, map) {
        return next;
    }
    match free_actions(p, map).choose(rng) {
        Some(&a) => try_move(p, a, map).unwrap_or(p),
        None => p,
    }
}

/// Linear-Gaussian hidden process `x' = A·x + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub x: DVector<f64>,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    noise_factor: Option<DMatrix<f64>>,
}

impl HiddenState {
    pub fn new(x: DVector<f64>, a: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = x.len();
        if !d.is_multiple_of(2) {
            return Err(Error::Dimension(format!("hidden state dimension {d} is odd")));
        }
        if a.shape() != (d, d) || q.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "A is {:?} and Q is {:?}, expected {d}x{d}",
                a.shape(),
                q.shape()
            )));
        }
        if (&q - q.transpose()).amax() > 1e-12 {
            return Err(Error::Config("process noise covariance Q is not symmetric".into()));
        }
        let noise_factor = psd_factor(&q)?;
        Ok(HiddenState { x, a, q, noise_factor })
    }

    /// Static targets: `A = I`, `Q = 0`.
    pub fn static_targets(x: DVector<f64>) -> Result<Self> {
        let d = x.len();
        HiddenState::new(x, DMatrix::identity(d, d), DMatrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn target_count(&self) -> usize {
        self.x.len() / 2
    }

    pub fn target_position(&self, k: usize) -> [f64; 2] {
        [self.x[2 * k], self.x[2 * k + 1]]
    }

    pub fn is_static(&self) -> bool {
        self.noise_factor.is_none() && self.a == DMatrix::identity(self.dim(), self.dim())
    }

    pub fn step_hidden<R: Rng + ?Sized>(&self, rng: &mut R) -> HiddenState {
        let mut x = &self.a * &self.x;
        if let Some(l) = &self.noise_factor {
            let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            x += l * z;
        }
        HiddenState { x, ..self.clone() }
    }
}

/// `L` with `L·Lᵀ = Q` for symmetric PSD `Q`; `None` when `Q = 0`.
fn psd_factor(q: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if q.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let eig = nalgebra::SymmetricEigen::new(q.clone());
    let scale = q.amax();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::Config("process noise covariance Q is not PSD".into()));
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(Some(&eig.eigenvectors * sqrt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    /// Sensing radius in meters.
    pub r_sense: f64,
    /// Measurement noise standard deviation relative to each coordinate.
    pub noise_scale: f64,
    /// Whether obstacles block line of sight.
    #[serde(default = "default_occlusion")]
    pub occlusion: bool,
}

fn default_occlusion() -> bool {
    true
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec { r_sense: 2.0, noise_scale: 0.05, occlusion: true }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_sense > 0.0) {
            return Err(Error::Config(format!("r_sense must be positive, got {}", self.r_sense)));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config(format!(
                "noise_scale must be nonnegative, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Cells crossed by the segment between two cells (Bresenham), endpoints
/// included.
pub fn bresenham(a: Cell, b: Cell) -> Vec<Cell> {
    let (mut x0, mut y0) = (a.col as i64, a.row as i64);
    let (x1, y1) = (b.col as i64, b.row as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut cells = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        cells.push(Cell::new(y0 as usize, x0 as usize));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    cells
}

pub fn line_of_sight(map: &GridMap, from: Cell, to: Cell) -> bool {
    bresenham(from, to).into_iter().skip(1).all(|c| !map.is_obstacle(c))
}

/// Indices of the targets in `x` that a robot at `p` can see.
pub fn visible_targets(p: Cell, x: &DVector<f64>, spec: &SensorSpec, map: &GridMap) -> Vec<usize> {
    let [px, py] = map.cell_center(p);
    (0..x.len() / 2)
        .filter(|&k| {
            let (tx, ty) = (x[2 * k], x[2 * k + 1]);
            let d = ((tx - px).powi(2) + (ty - py).powi(2)).sqrt();
            if d > spec.r_sense + 1e-9 {
                return false;
            }
            !spec.occlusion || line_of_sight(map, p, map.cell_of_point(tx, ty))
        })
        .collect()
}

/// Selection matrix picking the coordinates of the given targets.
pub fn selection_matrix(visible: &[usize], dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * visible.len(), dim);
    for (row, &k) in visible.iter().enumerate() {
        m[(2 * row, 2 * k)] = 1.0;
        m[(2 * row + 1, 2 * k + 1)] = 1.0;
    }
    m
}

/// `M(p)`: a `2k × d_x` selection of the `k` visible targets.
pub fn observation_matrix(p: Cell, x: &DVector<f64>, spec: &SensorSpec, map: &GridMap) -> DMatrix<f64> {
    selection_matrix(&visible_targets(p, x, spec, map), x.len())
}

/// Measurement covariance `(noise_scale ⊙ x)²` restricted to the visible
/// targets, each variance floored at [`MIN_NOISE_VARIANCE`].
pub fn measurement_noise(visible: &[usize], x: &DVector<f64>, spec: &SensorSpec) -> DMatrix<f64> {
    let diag: Vec<f64> = visible
        .iter()
        .flat_map(|&k| [x[2 * k], x[2 * k + 1]])
        .map(|v| (spec.noise_scale * v).powi(2).max(MIN_NOISE_VARIANCE))
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub visible: Vec<usize>,
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// `y = M(p)·x + v` with `v ~ N(0, R)`.
pub fn observe<R: Rng + ?Sized>(
    p: Cell,
    x: &HiddenState,
    spec: &SensorSpec,
    map: &GridMap,
    rng: &mut R,
) -> Observation {
    let visible = visible_targets(p, &x.x, spec, map);
    let m = selection_matrix(&visible, x.dim());
    let r = measurement_noise(&visible, &x.x, spec);
    let mut y = &m * &x.x;
    if spec.noise_scale > 0.0 {
        for i in 0..y.len() {
            let n: f64 = rng.sample(StandardNormal);
            y[i] += r[(i, i)].sqrt() * n;
        }
    }
    Observation { visible, m, r, y }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent 4-connected flood fill.
    fn connected(map: &GridMap) -> bool {
        let free = map.free_cells();
        let mut stack = vec![free[0]];
        let mut seen = std::collections::HashSet::from([free[0]]);
        while let Some(c) = stack.pop() {
            let mut nbrs = vec![];
            if c.row > 0 {
                nbrs.push(Cell::new(c.row - 1, c.col));
            }
            if c.col > 0 {
                nbrs.push(Cell::new(c.row, c.col - 1));
            }
            nbrs.push(Cell::new(c.row + 1, c.col));
            nbrs.push(Cell::new(c.row, c.col + 1));
            for n in nbrs {
                if map.is_free(n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        seen.len() == free.len()
    }

    /// Number of 8-connected obstacle components.
    fn obstacle_components(map: &GridMap) -> usize {
        let mut seen = vec![false; map.height() * map.width()];
        let mut count = 0;
        for r in 0..map.height() {
            for c in 0..map.width() {
                let start = Cell::new(r, c);
                if !map.is_obstacle(start) || seen[map.index(start)] {
                    continue;
                }
                count += 1;
                let mut stack = vec![start];
                seen[map.index(start)] = true;
                while let Some(p) = stack.pop() {
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (nr, nc) = (p.row as i64 + dr, p.col as i64 + dc);
                            if nr < 0 || nc < 0 {
                                continue;
                            }
                            let n = Cell::new(nr as usize, nc as usize);
                            if map.is_obstacle(n) && !seen[map.index(n)] {
                                seen[map.index(n)] = true;
                                stack.push(n);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn zero_obstacles_gives_open_map() {
        let map = generate_environment(1, 40, 40, 0, 0.5).unwrap();
        assert_eq!(map.free_cells().len(), 1600);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_environment(1, 20, 30, 6, 0.5).unwrap();
        let b = generate_environment(1, 20, 30, 6, 0.5).unwrap();
        assert_eq!(a, b);
        let c = generate_environment(2, 20, 30, 6, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_blobs_are_counted_and_free_space_connected() {
        let map = generate_environment(7, 20, 20, 5, 0.5).unwrap();
        assert_eq!(obstacle_components(&map), 5);
        assert!(connected(&map));
        for seed in 0..30 {
            let map = generate_environment(seed, 12, 15, 8, 0.5).unwrap();
            assert_eq!(obstacle_components(&map), 8, "seed {seed}");
            assert!(connected(&map), "seed {seed}");
        }
    }

    #[test]
    fn impossible_generation_fails() {
        assert!(generate_environment(1, 2, 2, 4, 0.5).is_err());
        // Three non-touching blobs cannot fit on a 1x4 strip.
        assert!(matches!(
            generate_environment(1, 1, 4, 3, 0.5),
            Err(Error::EnvironmentGeneration(_))
        ));
    }

    #[test]
    fn step_moves_one_cell() {
        let map = GridMap::open(10, 10, 0.5).unwrap();
        let mut r = rng(0);
        assert_eq!(step_robot(Cell::new(5, 5), Action::Right, &map, &mut r), Cell::new(5, 6));
        assert_eq!(step_robot(Cell::new(5, 5), Action::Up, &map, &mut r), Cell::new(4, 5));
        assert_eq!(step_robot(Cell::new(5, 5), Action::Left, &map, &mut r), Cell::new(5, 4));
        assert_eq!(step_robot(Cell::new(5, 5), Action::Down, &map, &mut r), Cell::new(6, 5));
    }

    #[test]
    fn walled_in_robot_stays() {
        let map = GridMap::from_ascii(&["###", "#.#", "###"], 0.5).unwrap();
        let mut r = rng(0);
        for a in Action::ALL {
            assert_eq!(step_robot(Cell::new(1, 1), a, &map, &mut r), Cell::new(1, 1));
        }
    }

    #[test]
    fn blocked_action_falls_back_uniformly() {
        // Obstacle to the right of (2,2); free neighbours: left, up, down.
        let map = GridMap::from_ascii(&[".....", ".....", "...#.", ".....", "....."], 0.5).unwrap();
        let p = Cell::new(2, 2);
        let mut r = rng(11);
        let trials = 10_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..trials {
            let n = step_robot(p, Action::Right, &map, &mut r);
            assert!(map.is_free(n));
            *counts.entry(n).or_insert(0usize) += 1;
        }
        let expected_cells = [Cell::new(2, 1), Cell::new(1, 2), Cell::new(3, 2)];
        assert_eq!(counts.len(), 3);
        let e = trials as f64 / 3.0;
        let chi2: f64 = expected_cells
            .iter()
            .map(|c| (counts[c] as f64 - e).powi(2) / e)
            .sum();
        // 2 degrees of freedom, 99.9% quantile.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn static_hidden_state_is_fixed() {
        let h = HiddenState::static_targets(DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let next = h.step_hidden(&mut rng(0));
        assert_eq!(next.x, h.x);
        assert!(h.is_static());
    }

    #[test]
    fn hidden_transition_without_noise() {
        let h = HiddenState::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert_eq!(h.step_hidden(&mut rng(0)).x.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn hidden_noise_sample_mean() {
        let sigma: f64 = 0.7;
        let h = HiddenState::new(
            DVector::from_vec(vec![1.0, -3.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * sigma * sigma,
        )
        .unwrap();
        let n = 100_000;
        let mut r = rng(5);
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            sum += h.step_hidden(&mut r).x;
        }
        let mean = sum / n as f64;
        let tol = 4.0 * sigma / (n as f64).sqrt();
        assert!((mean[0] - 1.0).abs() < tol && (mean[1] + 3.0).abs() < tol, "{mean}");
    }

    #[test]
    fn odd_or_asymmetric_hidden_state_rejected() {
        assert!(HiddenState::static_targets(DVector::from_vec(vec![1.0])).is_err());
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(HiddenState::new(DVector::zeros(2), DMatrix::identity(2, 2), q).is_err());
    }

    #[test]
    fn observation_matrix_selects_visible_targets() {
        let map = GridMap::open(10, 10, 0.5).unwrap();
        let spec = SensorSpec { r_sense: 2.0, noise_scale: 0.05, occlusion: true };
        // Robot at (0,0) center (0.25, 0.25); target 0 near, target 1 far.
        let x = DVector::from_vec(vec![0.75, 0.25, 4.75, 4.75]);
        let m = observation_matrix(Cell::new(0, 0), &x, &spec, &map);
        assert_eq!(m, selection_matrix(&[0], 4));
        let far = DVector::from_vec(vec![4.75, 4.75, 4.25, 4.75]);
        assert_eq!(observation_matrix(Cell::new(0, 0), &far, &spec, &map).nrows(), 0);
        let all = DVector::from_vec(vec![0.75, 0.25, 0.25, 0.75]);
        assert_eq!(
            observation_matrix(Cell::new(0, 0), &all, &spec, &map),
            DMatrix::<f64>::identity(4, 4)
        );
    }

    #[test]
    fn occluded_target_is_excluded() {
        // Robot at (3,0), wall column 3 rows 1..=5, targets at (3,6) and (0,6).
        let rows = [".......", "...#...", "...#...", "...#...", "...#...", "...#...", "......."];
        let map = GridMap::from_ascii(&rows, 0.5).unwrap();
        let spec = SensorSpec { r_sense: 10.0, noise_scale: 0.05, occlusion: true };
        let behind = map.cell_center(Cell::new(3, 6));
        let around = map.cell_center(Cell::new(0, 1));
        let x = DVector::from_vec(vec![behind[0], behind[1], around[0], around[1]]);
        let robot = Cell::new(3, 0);
        // Ray-cast oracle: straight row 3 passes through (3,3), an obstacle.
        assert!(map.is_obstacle(Cell::new(3, 3)));
        assert_eq!(visible_targets(robot, &x, &spec, &map), vec![1]);
        let no_occlusion = SensorSpec { occlusion: false, ..spec };
        assert_eq!(visible_targets(robot, &x, &no_occlusion, &map), vec![0, 1]);
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let map = GridMap::open(20, 20, 0.5).unwrap();
        let spec = SensorSpec { r_sense: 2.0, noise_scale: 0.0, occlusion: true };
        let h = HiddenState::static_targets(DVector::from_vec(vec![3.0, 4.0])).unwrap();
        let obs = observe(Cell::new(7, 5), &h, &spec, &map, &mut rng(0));
        assert_eq!(obs.y.as_slice(), &[3.0, 4.0]);
        let obs = observe(Cell::new(0, 19), &h, &spec, &map, &mut rng(0));
        assert_eq!(obs.y.len(), 0);
        assert_eq!(obs.m.nrows(), 0);
    }

    #[test]
    fn measurement_variance_follows_relative_noise() {
        let map = GridMap::open(40, 40, 0.5).unwrap();
        let spec = SensorSpec { r_sense: 2.0, noise_scale: 0.05, occlusion: true };
        let h = HiddenState::static_targets(DVector::from_vec(vec![10.0, 10.0])).unwrap();
        let p = map.cell_of_point(10.0, 10.0);
        let mut r = rng(3);
        let n = 100_000;
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let y = observe(p, &h, &spec, &map, &mut r).y;
            for k in 0..2 {
                s[k] += y[k];
                s2[k] += y[k] * y[k];
            }
        }
        for k in 0..2 {
            let mean = s[k] / n as f64;
            let var = s2[k] / n as f64 - mean * mean;
            assert!((var - 0.25).abs() / 0.25 < 0.05, "axis {k}: var {var}");
        }
    }

    #[test]
    fn bresenham_endpoints() {
        let line = bresenham(Cell::new(0, 0), Cell::new(2, 5));
        assert_eq!(line.first(), Some(&Cell::new(0, 0)));
        assert_eq!(line.last(), Some(&Cell::new(2, 5)));
        assert_eq!(line.len(), 6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn step_never_leaves_free_space(seed in 0u64..200, r in 0usize..10, c in 0usize..10, a in 0usize..4) {
                let map = generate_environment(seed, 10, 10, 6, 0.5).unwrap();
                let p = Cell::new(r, c);
                prop_assume!(map.is_free(p));
                let n = step_robot(p, Action::ALL[a], &map, &mut rng(seed));
                prop_assert!(map.is_free(n));
            }

            #[test]
            fn selection_rows_are_orthonormal(
                seed in 0u64..100,
                r in 0usize..12, c in 0usize..12,
                coords in proptest::collection::vec(0.0f64..6.0, 6),
                radius in 0.5f64..4.0,
            ) {
                let map = generate_environment(seed, 12, 12, 5, 0.5).unwrap();
                let p = Cell::new(r, c);
                prop_assume!(map.is_free(p));
                let x = DVector::from_vec(coords);
                let spec = SensorSpec { r_sense: radius, noise_scale: 0.05, occlusion: true };
                let m = observation_matrix(p, &x, &spec, &map);
                let k2 = m.nrows();
                prop_assert_eq!(&m * m.transpose(), DMatrix::<f64>::identity(k2, k2));
                let smaller = SensorSpec { r_sense: radius * 0.5, ..spec };
                prop_assert!(observation_matrix(p, &x, &smaller, &map).nrows() <= k2);
            }
        }
    }
}
