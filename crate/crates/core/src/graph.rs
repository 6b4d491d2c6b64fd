//! Communication graphs, consensus weights, position grids and failure
//! injection.
//!
//! Edges are directed: `(i, j)` means robot `i` receives from robot `j`, so
//! the closed neighbourhood `Ñᵢ` is the set of `j` with `(i, j)` present.
//! Self-loops are always present.

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::estimation::InnovationInfo;
use crate::grid::Grid;
use crate::world::{Cell, GridMap};

/// Consensus weight a robot keeps for itself when it has neighbours.
pub const SELF_WEIGHT: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeSet {
    n: usize,
    adj: Vec<bool>,
}

impl EdgeSet {
    pub fn self_loops(n: usize) -> Self {
        let mut adj = vec![false; n * n];
        for i in 0..n {
            adj[i * n + i] = true;
        }
        EdgeSet { n, adj }
    }

    pub fn fully_connected(n: usize) -> Self {
        EdgeSet { n, adj: vec![true; n * n] }
    }

    /// Builds from an `n×n` adjacency; self-loops are forced on.
    pub fn from_adjacency(n: usize, adj: Vec<bool>) -> Result<Self> {
        if adj.len() != n * n {
            return Err(Error::Dimension(format!("adjacency has {} entries for {n} nodes", adj.len())));
        }
        let mut e = EdgeSet { n, adj };
        for i in 0..n {
            e.adj[i * n + i] = true;
        }
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        self.adj[i * self.n + j] = true;
    }

    /// Removes `(i, j)`; self-loops cannot be removed.
    pub fn remove(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i * self.n + j] = false;
        }
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adj
    }

    /// `𝒩ᵢ`: neighbours of `i`, excluding itself, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| j != i && self.contains(i, j)).collect()
    }

    /// `Ñᵢ = 𝒩ᵢ ∪ {i}`, ascending.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.contains(i, j)).collect()
    }

    pub fn non_self_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && self.contains(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Drops every edge touching `i` except its self-loop.
    pub fn isolate(&mut self, i: usize) {
        for j in 0..self.n {
            self.remove(i, j);
            self.remove(j, i);
        }
    }
}

/// Distance-defined communication graph; `None` range means fully connected.
pub fn build_comm_graph(positions: &[Cell], r_com: Option<f64>, cell_size: f64) -> EdgeSet {
    let n = positions.len();
    let Some(r_com) = r_com else {
        return EdgeSet::fully_connected(n);
    };
    let mut edges = EdgeSet::self_loops(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dr = positions[i].row as f64 - positions[j].row as f64;
            let dc = positions[i].col as f64 - positions[j].col as f64;
            if cell_size * (dr * dr + dc * dc).sqrt() <= r_com + 1e-9 {
                edges.insert(i, j);
            }
        }
    }
    edges
}

/// `κᵢᵢ = 0.75`, `κᵢⱼ = 0.25/|𝒩ᵢ|`; an isolated node keeps all weight.
pub fn weight_matrix(edges: &EdgeSet) -> DMatrix<f64> {
    let n = edges.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let nbrs = edges.neighbors(i);
        if nbrs.is_empty() {
            w[(i, i)] = 1.0;
            continue;
        }
        w[(i, i)] = SELF_WEIGHT;
        let share = (1.0 - SELF_WEIGHT) / nbrs.len() as f64;
        for j in nbrs {
            w[(i, j)] = share;
        }
    }
    w
}

/// `ℐ(p)`: one at the robot's cell, zero elsewhere.
pub fn binary_map(p: Cell, map: &GridMap) -> Grid {
    let mut g = Grid::zeros(map.height(), map.width());
    g.set(p.row, p.col, 1.0);
    g
}

/// `p̂ᵢ = Σ_{j∈Ñᵢ} ℐ(pⱼ) − ℐ(pᵢ)`; `neighbor_maps` includes the robot itself.
pub fn aggregate_positions(neighbor_maps: &[&Grid], self_map: &Grid) -> Result<Grid> {
    let mut out = Grid::zeros(self_map.height, self_map.width);
    for g in neighbor_maps {
        self_map.check_shape(g, "neighbour position map")?;
        for (o, v) in out.data.iter_mut().zip(&g.data) {
            *o += v;
        }
    }
    for (o, v) in out.data.iter_mut().zip(&self_map.data) {
        *o -= v;
    }
    Ok(out)
}

/// Per-robot attribute `Vᵢ = {pᵢ, Zᵢ, μᵢ, Ωᵢ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAttribute {
    pub p: Cell,
    pub z: InnovationInfo,
    pub mu: DVector<f64>,
    pub omega: DMatrix<f64>,
}

/// Snapshot of the team at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub attributes: Vec<NodeAttribute>,
    pub edges: EdgeSet,
    pub weights: DMatrix<f64>,
    pub map: Arc<GridMap>,
    pub active: Vec<bool>,
}

impl NetworkGraph {
    /// Builds a graph with the standard consensus weights.
    pub fn new(attributes: Vec<NodeAttribute>, edges: EdgeSet, map: Arc<GridMap>) -> Result<Self> {
        let n = attributes.len();
        if edges.len() != n {
            return Err(Error::Dimension(format!("{} edges rows for {n} nodes", edges.len())));
        }
        let weights = weight_matrix(&edges);
        Ok(NetworkGraph { attributes, edges, weights, map, active: vec![true; n] })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn positions(&self) -> Vec<Cell> {
        self.attributes.iter().map(|a| a.p).collect()
    }

    /// `Ñᵢ` in a canonical, label-free order: the node itself first, then
    /// neighbours sorted by attribute content. Sums taken in this order do not
    /// depend on how robots are numbered.
    pub fn consensus_order(&self, i: usize) -> Vec<usize> {
        let mut nbrs = self.edges.neighbors(i);
        nbrs.sort_by(|&a, &b| self.content_cmp(i, a, b));
        let mut order = Vec::with_capacity(nbrs.len() + 1);
        order.push(i);
        order.extend(nbrs);
        order
    }

    fn content_cmp(&self, i: usize, a: usize, b: usize) -> Ordering {
        let (x, y) = (&self.attributes[a], &self.attributes[b]);
        self.weights[(i, a)]
            .total_cmp(&self.weights[(i, b)])
            .then(x.p.cmp(&y.p))
            .then_with(|| lex(x.omega.as_slice(), y.omega.as_slice()))
            .then_with(|| lex(x.mu.as_slice(), y.mu.as_slice()))
            .then_with(|| lex(x.z.0.as_slice(), y.z.0.as_slice()))
    }
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn check_permutation(pi: &[usize], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} for {n} nodes", pi.len())));
    }
    let mut seen = vec![false; n];
    for &p in pi {
        if p >= n || seen[p] {
            return Err(Error::InvalidPermutation(format!("{pi:?} is not a bijection")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Relabels node `i` as `pi[i]`: attributes move, edges and weights are
/// conjugated by the permutation matrix, the map is shared.
pub fn permute_graph(graph: &NetworkGraph, pi: &[usize]) -> Result<NetworkGraph> {
    let n = graph.len();
    check_permutation(pi, n)?;
    let mut attributes = graph.attributes.clone();
    let mut active = graph.active.clone();
    let mut adj = vec![false; n * n];
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        attributes[pi[i]] = graph.attributes[i].clone();
        active[pi[i]] = graph.active[i];
        for j in 0..n {
            adj[pi[i] * n + pi[j]] = graph.edges.contains(i, j);
            weights[(pi[i], pi[j])] = graph.weights[(i, j)];
        }
    }
    Ok(NetworkGraph {
        attributes,
        edges: EdgeSet::from_adjacency(n, adj)?,
        weights,
        map: Arc::clone(&graph.map),
        active,
    })
}

/// Poisson communication loss: draws `k ~ Poisson(λ)` and deletes
/// `min(k, available)` non-self edges uniformly without replacement.
/// Returns the new edge set and the number of deleted edges.
pub fn drop_edges_poisson<R: Rng + ?Sized>(edges: &EdgeSet, lambda: f64, rng: &mut R) -> (EdgeSet, usize) {
    let mut out = edges.clone();
    if !(lambda > 0.0) {
        return (out, 0);
    }
    let candidates = edges.non_self_edges();
    let poisson = Poisson::new(lambda).expect("positive finite rate");
    let k = poisson.sample(rng) as usize;
    let k = k.min(candidates.len());
    if k == 0 {
        return (out, 0);
    }
    for idx in sample(rng, candidates.len(), k) {
        let (i, j) = candidates[idx];
        out.remove(i, j);
    }
    (out, k)
}

/// Permanently isolates robot `i` and marks it inactive; surviving weights
/// are renormalized over their new neighbourhoods.
pub fn kill_agent(graph: &NetworkGraph, i: usize) -> NetworkGraph {
    let mut g = graph.clone();
    g.edges.isolate(i);
    g.active[i] = false;
    g.weights = weight_matrix(&g.edges);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attr(p: Cell, scale: f64) -> NodeAttribute {
        NodeAttribute {
            p,
            z: InnovationInfo::zeros(2),
            mu: DVector::from_vec(vec![scale, -scale]),
            omega: DMatrix::identity(2, 2) * scale,
        }
    }

    fn graph3(map: &Arc<GridMap>) -> NetworkGraph {
        let attrs = vec![attr(Cell::new(0, 0), 1.0), attr(Cell::new(1, 1), 2.0), attr(Cell::new(2, 2), 3.0)];
        NetworkGraph::new(attrs, EdgeSet::fully_connected(3), Arc::clone(map)).unwrap()
    }

    #[test]
    fn range_graph_examples() {
        // Cells of 0.5 m: 2 cells apart = 1 m.
        let e = build_comm_graph(&[Cell::new(0, 0), Cell::new(0, 2)], Some(4.0), 0.5);
        assert_eq!(e, EdgeSet::fully_connected(2));
        let e = build_comm_graph(&[Cell::new(0, 0), Cell::new(0, 20)], Some(4.0), 0.5);
        assert_eq!(e, EdgeSet::self_loops(2));
        // Collinear, 3 m spacing: distance table 3, 3, 6.
        let e = build_comm_graph(&[Cell::new(0, 0), Cell::new(0, 6), Cell::new(0, 12)], Some(4.0), 0.5);
        assert!(e.contains(0, 1) && e.contains(1, 0) && e.contains(1, 2) && e.contains(2, 1));
        assert!(!e.contains(0, 2) && !e.contains(2, 0));
        assert_eq!(build_comm_graph(&[Cell::new(0, 0), Cell::new(0, 99)], None, 0.5).edge_count(), 4);
    }

    #[test]
    fn weight_examples() {
        let w = weight_matrix(&EdgeSet::self_loops(3));
        assert_eq!(w, DMatrix::identity(3, 3));
        let w = weight_matrix(&EdgeSet::fully_connected(2));
        assert_eq!((w[(0, 0)], w[(0, 1)]), (0.75, 0.25));
        let w = weight_matrix(&EdgeSet::fully_connected(6));
        assert_eq!(w[(0, 0)], 0.75);
        for j in 1..6 {
            assert!((w[(0, j)] - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn position_maps() {
        let map = GridMap::open(4, 5, 0.5).unwrap();
        let a = binary_map(Cell::new(0, 0), &map);
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.sum(), 1.0);
        let b = binary_map(Cell::new(2, 3), &map);
        let both: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x + y).filter(|&v| v == 1.0).sum();
        assert_eq!(both, 2.0);

        let me = binary_map(Cell::new(1, 1), &map);
        assert_eq!(aggregate_positions(&[&me], &me).unwrap().sum(), 0.0);
        let p = aggregate_positions(&[&me, &b], &me).unwrap();
        assert_eq!(p.get(2, 3), 1.0);
        assert_eq!(p.sum(), 1.0);
        let p = aggregate_positions(&[&me, &b, &b], &me).unwrap();
        assert_eq!(p.get(2, 3), 2.0);

        let wrong = Grid::zeros(3, 3);
        assert!(aggregate_positions(&[&wrong], &me).is_err());
    }

    #[test]
    fn permutation_examples() {
        let map = Arc::new(GridMap::open(3, 3, 0.5).unwrap());
        let g = graph3(&map);
        assert_eq!(permute_graph(&g, &[0, 1, 2]).unwrap(), g);
        let pi = [2, 0, 1];
        let inv = [1, 2, 0];
        assert_eq!(permute_graph(&permute_graph(&g, &pi).unwrap(), &inv).unwrap(), g);
        assert!(permute_graph(&g, &[0, 0, 1]).is_err());
        assert!(permute_graph(&g, &[0, 1]).is_err());

        // Explicit 2x2 conjugation on an asymmetric graph.
        let mut e = EdgeSet::self_loops(2);
        e.insert(0, 1);
        let attrs = vec![attr(Cell::new(0, 0), 1.0), attr(Cell::new(1, 1), 2.0)];
        let g = NetworkGraph::new(attrs, e, Arc::clone(&map)).unwrap();
        assert_eq!(g.weights, DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.0, 1.0]));
        let s = permute_graph(&g, &[1, 0]).unwrap();
        assert_eq!(s.attributes[0], g.attributes[1]);
        assert_eq!(s.attributes[1], g.attributes[0]);
        assert_eq!(s.weights, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.25, 0.75]));
        assert!(s.edges.contains(1, 0) && !s.edges.contains(0, 1));
    }

    #[test]
    fn poisson_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = EdgeSet::fully_connected(4);
        assert_eq!(drop_edges_poisson(&full, 0.0, &mut rng).0, full);
        let loops = EdgeSet::self_loops(3);
        assert_eq!(drop_edges_poisson(&loops, 1.0, &mut rng).0, loops);

        // Two non-self edges: expected deletions E[min(K, 2)], K ~ Poisson(1).
        let e1 = (-1.0f64).exp();
        let expected = 0.0 * e1 + 1.0 * e1 + 2.0 * (1.0 - 2.0 * e1);
        let two = EdgeSet::fully_connected(2);
        let trials = 100_000;
        let mut total = 0usize;
        for _ in 0..trials {
            let (e, k) = drop_edges_poisson(&two, 1.0, &mut rng);
            assert!(e.contains(0, 0) && e.contains(1, 1));
            assert_eq!(two.edge_count() - e.edge_count(), k);
            total += k;
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - expected).abs() / expected < 0.02, "mean {mean} vs {expected}");
    }

    #[test]
    fn killing_isolates_and_renormalizes() {
        let map = Arc::new(GridMap::open(3, 3, 0.5).unwrap());
        let g = graph3(&map);
        let k = kill_agent(&g, 1);
        assert_eq!(k.edges.neighbors(1), Vec::<usize>::new());
        assert!(k.edges.contains(0, 2) && k.edges.contains(2, 0));
        assert!(!k.active[1]);
        assert_eq!(kill_agent(&k, 1), k);
        // Each survivor now has a single neighbour.
        assert_eq!(k.weights, weight_matrix(&k.edges));
        assert_eq!((k.weights[(0, 0)], k.weights[(0, 2)], k.weights[(0, 1)]), (0.75, 0.25, 0.0));
        assert_eq!(k.weights[(1, 1)], 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn edges(n: usize) -> impl Strategy<Value = EdgeSet> {
            proptest::collection::vec(any::<bool>(), n * n)
                .prop_map(move |adj| EdgeSet::from_adjacency(n, adj).unwrap())
        }

        proptest! {
            #[test]
            fn rows_are_stochastic(e in (1usize..8).prop_flat_map(edges)) {
                let w = weight_matrix(&e);
                for i in 0..e.len() {
                    let s: f64 = e.closed_neighborhood(i).iter().map(|&j| w[(i, j)]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    for j in 0..e.len() {
                        prop_assert_eq!(w[(i, j)] > 0.0, e.contains(i, j));
                    }
                }
            }

            #[test]
            fn range_graph_is_symmetric(cells in proptest::collection::vec((0usize..20, 0usize..20), 1..7), r in 0.5f64..6.0) {
                let pos: Vec<Cell> = cells.into_iter().map(Cell::from).collect();
                let e = build_comm_graph(&pos, Some(r), 0.5);
                for i in 0..pos.len() {
                    prop_assert!(e.contains(i, i));
                    for j in 0..pos.len() {
                        prop_assert_eq!(e.contains(i, j), e.contains(j, i));
                    }
                }
            }

            #[test]
            fn permutation_preserves_edges_and_attributes(
                e in (2usize..6).prop_flat_map(edges),
                seed in any::<u64>(),
            ) {
                let n = e.len();
                let map = Arc::new(GridMap::open(4, 4, 0.5).unwrap());
                let attrs = (0..n).map(|i| attr(Cell::new(i % 4, i / 4), 1.0 + i as f64)).collect();
                let g = NetworkGraph::new(attrs, e, map).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut pi: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(pi.as_mut_slice(), &mut rng);
                let p = permute_graph(&g, &pi).unwrap();
                prop_assert_eq!(p.edges.edge_count(), g.edges.edge_count());
                let mut a: Vec<f64> = g.attributes.iter().map(|x| x.omega[(0, 0)]).collect();
                let mut b: Vec<f64> = p.attributes.iter().map(|x| x.omega[(0, 0)]).collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn aggregated_mass_counts_neighbours(
                e in (1usize..6).prop_flat_map(edges),
                cells in proptest::collection::vec((0usize..5, 0usize..5), 6),
            ) {
                let map = GridMap::open(5, 5, 0.5).unwrap();
                let maps: Vec<Grid> = cells.iter().map(|&c| binary_map(Cell::from(c), &map)).collect();
                for i in 0..e.len() {
                    let nb: Vec<&Grid> = e.closed_neighborhood(i).into_iter().map(|j| &maps[j]).collect();
                    let p = aggregate_positions(&nb, &maps[i]).unwrap();
                    prop_assert!(p.data.iter().all(|&v| v >= 0.0));
                    prop_assert_eq!(p.sum(), e.neighbors(i).len() as f64);
                }
            }
        }
    }
}
