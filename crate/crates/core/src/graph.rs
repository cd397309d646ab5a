//! Finite weighted graphs, lattice boxes and pinned extensions.
//!
//! Vertices are dense indices `0..n`. An edge is identified by its index in
//! the edge list and stored once as a sorted pair `(i, j)` with `i < j`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Maximum vertex count for brute-force spanning-tree enumeration.
pub const TREE_ENUMERATION_CAP: usize = 8;

/// Default cap on lattice box sizes.
pub const DEFAULT_VERTEX_CAP: usize = 200_000;

/// Connected simple graph with one positive weight per undirected edge.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph<T> {
    n: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<T>,
    /// `adjacency[i]` lists `(neighbour, edge index)` sorted by neighbour.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl<T: Scalar> WeightedGraph<T> {
    /// Builds and validates a graph from `(i, j, weight)` triples.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize, T)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        let mut weights = Vec::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge {{{i},{j}}} references a vertex outside 0..{n}"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {i}")));
            }
            if !(w > T::zero()) || !w.is_finite() {
                return Err(Error::InvalidGraph(format!(
                    "edge {{{i},{j}}} has non-positive weight {w}"
                )));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge {{{},{}}}",
                    key.0, key.1
                )));
            }
            pairs.push(key);
            weights.push(w);
        }
        let mut adjacency = vec![Vec::new(); n];
        for (e, &(i, j)) in pairs.iter().enumerate() {
            adjacency[i].push((j, e));
            adjacency[j].push((i, e));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let g = Self {
            n,
            edges: pairs,
            weights,
            adjacency,
        };
        let reached = g.component_size(0);
        if reached != n {
            return Err(Error::Disconnected { reached, total: n });
        }
        Ok(g)
    }

    fn component_size(&self, start: usize) -> usize {
        let mut seen = vec![false; self.n];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &(w, _) in &self.adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count
    }

    /// Same topology with new per-edge weights.
    pub fn with_weights(&self, weights: Vec<T>) -> Result<Self> {
        if weights.len() != self.edges.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights, got {}",
                self.edges.len(),
                weights.len()
            )));
        }
        if let Some((e, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > T::zero()) || !w.is_finite())
        {
            return Err(Error::InvalidGraph(format!("edge {e} has non-positive weight {w}")));
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    /// Replaces the weights in place (same validation as [`with_weights`](Self::with_weights)).
    pub fn set_weights(&mut self, weights: &[T]) -> Result<()> {
        if weights.len() != self.edges.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights, got {}",
                self.edges.len(),
                weights.len()
            )));
        }
        if let Some((e, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > T::zero()) || !w.is_finite())
        {
            return Err(Error::InvalidGraph(format!("edge {e} has non-positive weight {w}")));
        }
        self.weights.copy_from_slice(weights);
        Ok(())
    }

    /// Converts the weights to another scalar type.
    pub fn cast<U: Scalar>(&self) -> WeightedGraph<U> {
        WeightedGraph {
            n: self.n,
            edges: self.edges.clone(),
            weights: self.weights.iter().map(|w| U::lit(w.as_f64())).collect(),
            adjacency: self.adjacency.clone(),
        }
    }

    #[inline]
    pub fn n_vertices(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    #[inline]
    pub fn edge(&self, e: usize) -> (usize, usize) {
        self.edges[e]
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, e: usize) -> T {
        self.weights[e]
    }

    /// `(neighbour, edge index)` pairs of `i`, sorted by neighbour.
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[(usize, usize)] {
        &self.adjacency[i]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        self.adjacency
            .get(i)?
            .binary_search_by_key(&j, |&(v, _)| v)
            .ok()
            .map(|k| self.adjacency[i][k].1)
    }

    /// Weighted degree `Σ_{j∼i} w_ij`.
    pub fn weighted_degree(&self, i: usize) -> T {
        self.adjacency[i].iter().map(|&(_, e)| self.weights[e]).sum()
    }

    /// Weighted Laplacian (positive semidefinite convention) for per-edge
    /// conductances `c`.
    pub fn laplacian_with(&self, c: &[T]) -> Matrix<T> {
        assert_eq!(c.len(), self.edges.len());
        let mut l = Matrix::zeros(self.n, self.n);
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let w = c[e];
            l[(i, j)] = l[(i, j)] - w;
            l[(j, i)] = l[(j, i)] - w;
            l[(i, i)] = l[(i, i)] + w;
            l[(j, j)] = l[(j, j)] + w;
        }
        l
    }

    pub fn laplacian(&self) -> Matrix<T> {
        self.laplacian_with(&self.weights)
    }
}

/// Lists every spanning tree as a sorted vector of edge indices.
///
/// Brute-force enumeration over `(n-1)`-subsets; oracle use only.
pub fn spanning_trees<T: Scalar>(g: &WeightedGraph<T>) -> Result<Vec<Vec<usize>>> {
    let n = g.n_vertices();
    if n > TREE_ENUMERATION_CAP {
        return Err(Error::Capacity {
            what: "spanning-tree enumeration",
            requested: n,
            cap: TREE_ENUMERATION_CAP,
        });
    }
    let m = g.n_edges();
    let k = n - 1;
    let mut trees = Vec::new();
    let mut combo: Vec<usize> = (0..k).collect();
    if k > m {
        return Ok(trees);
    }
    loop {
        if is_spanning_tree(n, combo.iter().map(|&e| g.edge(e))) {
            trees.push(combo.clone());
        }
        // next k-combination of 0..m in lexicographic order
        let mut i = k;
        while i > 0 && combo[i - 1] == i - 1 + m - k {
            i -= 1;
        }
        if i == 0 {
            return Ok(trees);
        }
        combo[i - 1] += 1;
        for j in i..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

fn is_spanning_tree(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut joined = 0;
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            return false;
        }
        parent[ri] = rj;
        joined += 1;
    }
    joined == n - 1
}

/// Integer box `Λ_n = {x ∈ Z^d : ‖x‖_∞ ≤ n}` with nearest-neighbour edges.
#[derive(Debug, Clone)]
pub struct LatticeBox<T> {
    pub graph: WeightedGraph<T>,
    pub dim: usize,
    pub radius: usize,
    coords: Vec<Vec<i64>>,
    index: HashMap<Vec<i64>, usize>,
    origin: usize,
    boundary: Vec<usize>,
}

impl<T: Scalar> LatticeBox<T> {
    pub fn new(dim: usize, radius: usize, weight: T) -> Result<Self> {
        Self::with_cap(dim, radius, weight, DEFAULT_VERTEX_CAP)
    }

    pub fn with_cap(dim: usize, radius: usize, weight: T, cap: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("lattice dimension must be ≥ 1".into()));
        }
        let side = 2 * radius + 1;
        let count = u32::try_from(dim)
            .ok()
            .and_then(|d| side.checked_pow(d))
            .filter(|&c| c <= cap)
            .ok_or(Error::Capacity {
                what: "lattice box vertices",
                requested: side.saturating_pow(dim.min(u32::MAX as usize) as u32),
                cap,
            })?;
        let r = radius as i64;
        let mut coords = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        for k in 0..count {
            let mut rem = k;
            let mut x = vec![0i64; dim];
            for c in x.iter_mut().rev() {
                *c = (rem % side) as i64 - r;
                rem /= side;
            }
            index.insert(x.clone(), k);
            coords.push(x);
        }
        let mut edges = Vec::new();
        for (k, x) in coords.iter().enumerate() {
            for axis in 0..dim {
                if x[axis] < r {
                    let mut y = x.clone();
                    y[axis] += 1;
                    edges.push((k, index[&y], weight));
                }
            }
        }
        let graph = WeightedGraph::new(count, edges)?;
        let origin = index[&vec![0; dim]];
        let boundary = coords
            .iter()
            .enumerate()
            .filter(|(_, x)| x.iter().any(|c| c.abs() == r))
            .map(|(k, _)| k)
            .collect();
        Ok(Self {
            graph,
            dim,
            radius,
            coords,
            index,
            origin,
            boundary,
        })
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    /// Vertices with `‖x‖_∞ = n`.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn coords(&self, v: usize) -> &[i64] {
        &self.coords[v]
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        self.index.get(x).copied()
    }

    /// Vertex at `(k, 0, …, 0)`.
    pub fn axis_point(&self, k: usize) -> Option<usize> {
        let mut x = vec![0i64; self.dim];
        x[0] = k as i64;
        self.index_of(&x)
    }

    /// ℓ¹ distance of `v` to the origin.
    pub fn l1_norm(&self, v: usize) -> u64 {
        self.coords[v].iter().map(|c| c.unsigned_abs()).sum()
    }
}

/// Graph with an extra vertex `δ` joined to each `i` with weight `ε_i > 0`.
#[derive(Debug, Clone)]
pub struct PinnedGraph<T> {
    base: WeightedGraph<T>,
    eps: Vec<T>,
}

impl<T: Scalar> PinnedGraph<T> {
    pub fn new(base: WeightedGraph<T>, eps: Vec<T>) -> Result<Self> {
        if eps.len() != base.n_vertices() {
            return Err(Error::InvalidArgument(format!(
                "pinning vector has {} entries for {} vertices",
                eps.len(),
                base.n_vertices()
            )));
        }
        if eps.iter().any(|&e| e < T::zero() || !e.is_finite()) {
            return Err(Error::InvalidArgument("pinning weights must be finite and ≥ 0".into()));
        }
        if eps.iter().all(|&e| e == T::zero()) {
            return Err(Error::InvalidArgument("at least one pinning weight must be > 0".into()));
        }
        Ok(Self { base, eps })
    }

    /// Pins a single vertex with strength `eta`.
    pub fn point(base: WeightedGraph<T>, vertex: usize, eta: T) -> Result<Self> {
        let mut eps = vec![T::zero(); base.n_vertices()];
        *eps.get_mut(vertex)
            .ok_or_else(|| Error::InvalidArgument(format!("vertex {vertex} out of range")))? = eta;
        Self::new(base, eps)
    }

    pub fn base(&self) -> &WeightedGraph<T> {
        &self.base
    }

    pub fn eps(&self) -> &[T] {
        &self.eps
    }

    /// Index of the extra vertex in [`extended`](Self::extended).
    pub fn delta(&self) -> usize {
        self.base.n_vertices()
    }

    /// Graph on `V ∪ {δ}`; only edges with `ε_i > 0` are materialised.
    pub fn extended(&self) -> WeightedGraph<T> {
        let base = &self.base;
        let delta = self.delta();
        let edges = base
            .edges()
            .iter()
            .zip(base.weights())
            .map(|(&(i, j), &w)| (i, j, w))
            .chain(
                self.eps
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| e > T::zero())
                    .map(|(i, &e)| (i, delta, e)),
            );
        WeightedGraph::new(delta + 1, edges).expect("pinned extension of a valid graph is valid")
    }
}

/// Graph description file.
///
/// Either an explicit graph `{vertices, edges: [[i, j, w]], pinning?}` or a
/// lattice shorthand `{lattice: {d, n, weight}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum GraphSpec {
    Explicit {
        vertices: usize,
        edges: Vec<(usize, usize, f64)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pinning: Option<Vec<(usize, f64)>>,
    },
    Lattice { lattice: LatticeSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub d: usize,
    pub n: usize,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl GraphSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph spec serialises")
    }

    pub fn build<T: Scalar>(&self) -> Result<WeightedGraph<T>> {
        match self {
            GraphSpec::Explicit {
                vertices, edges, ..
            } => WeightedGraph::new(*vertices, edges.iter().map(|&(i, j, w)| (i, j, T::lit(w)))),
            GraphSpec::Lattice { lattice } => Ok(lattice.build::<T>()?.graph),
        }
    }

    /// Pinning vector, if the description carries one.
    pub fn pinning<T: Scalar>(&self) -> Result<Option<Vec<T>>> {
        match self {
            GraphSpec::Explicit {
                vertices,
                pinning: Some(p),
                ..
            } => {
                let mut eps = vec![T::zero(); *vertices];
                for &(i, e) in p {
                    *eps.get_mut(i).ok_or_else(|| {
                        Error::InvalidArgument(format!("pinning vertex {i} out of range"))
                    })? = T::lit(e);
                }
                Ok(Some(eps))
            }
            _ => Ok(None),
        }
    }
}

impl LatticeSpec {
    pub fn build<T: Scalar>(&self) -> Result<LatticeBox<T>> {
        LatticeBox::new(self.d, self.n, T::lit(self.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn triangle() -> WeightedGraph<f64> {
        WeightedGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap()
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(WeightedGraph::<f64>::new(2, [(0, 0, 1.0)]).is_err());
        assert!(WeightedGraph::<f64>::new(2, [(0, 1, 1.0), (1, 0, 2.0)]).is_err());
        assert!(WeightedGraph::<f64>::new(2, [(0, 1, 0.0)]).is_err());
        assert!(WeightedGraph::<f64>::new(2, [(0, 2, 1.0)]).is_err());
        assert!(matches!(
            WeightedGraph::<f64>::new(3, [(0, 1, 1.0)]),
            Err(Error::Disconnected { reached: 2, total: 3 })
        ));
    }

    #[test]
    fn symmetric_lookup() {
        let g = triangle();
        for &(i, j) in g.edges() {
            assert_eq!(g.edge_index(i, j), g.edge_index(j, i));
            assert!(g.edge_index(i, j).is_some());
        }
        assert_eq!(g.edge_index(1, 1), None);
    }

    #[test]
    fn lattice_counts() {
        let b = LatticeBox::new(1, 1, 1.0_f64).unwrap();
        assert_eq!((b.graph.n_vertices(), b.graph.n_edges()), (3, 2));
        let b = LatticeBox::new(2, 1, 1.0_f64).unwrap();
        assert_eq!((b.graph.n_vertices(), b.graph.n_edges()), (9, 12));
        assert_eq!(b.boundary().len(), 8);
        assert_eq!(b.coords(b.origin()), &[0, 0]);
        let b = LatticeBox::new(3, 0, 1.0_f64).unwrap();
        assert_eq!((b.graph.n_vertices(), b.graph.n_edges()), (1, 0));
        let b = LatticeBox::new(3, 2, 1.0_f64).unwrap();
        assert_eq!(b.graph.n_vertices(), 125);
        assert_eq!(b.graph.n_edges(), 3 * 5 * 5 * 4);
        assert_eq!(b.l1_norm(b.axis_point(2).unwrap()), 2);
    }

    #[test]
    fn lattice_cap() {
        assert!(matches!(
            LatticeBox::with_cap(3, 5, 1.0_f64, 100),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn spanning_tree_counts() {
        assert_eq!(spanning_trees(&triangle()).unwrap().len(), 3);
        let path = WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap();
        assert_eq!(spanning_trees(&path).unwrap().len(), 1);
        let cycle =
            WeightedGraph::new(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)]).unwrap();
        let trees = spanning_trees(&cycle).unwrap();
        assert_eq!(trees.len(), 4);
        assert!(trees.iter().all(|t| t.len() == 3));
        let k4 = WeightedGraph::new(
            4,
            (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j, 1.0))),
        )
        .unwrap();
        assert_eq!(spanning_trees(&k4).unwrap().len(), 16);
        let single = WeightedGraph::<f64>::new(1, []).unwrap();
        assert_eq!(spanning_trees(&single).unwrap(), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn spanning_tree_cap() {
        let b = LatticeBox::new(2, 1, 1.0_f64).unwrap();
        assert!(matches!(spanning_trees(&b.graph), Err(Error::Capacity { .. })));
    }

    #[test]
    fn pinned_extension() {
        let p = PinnedGraph::new(triangle(), vec![0.5, 0.0, 2.0]).unwrap();
        let ext = p.extended();
        assert_eq!(ext.n_vertices(), 4);
        assert_eq!(ext.n_edges(), 5);
        assert_eq!(ext.weight(ext.edge_index(0, 3).unwrap()), 0.5);
        assert!(ext.edge_index(1, 3).is_none());
        assert!(PinnedGraph::new(triangle(), vec![0.0; 3]).is_err());
        assert!(PinnedGraph::new(triangle(), vec![-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn graph_spec_parsing() {
        let s = GraphSpec::from_json(
            r#"{"vertices": 3, "edges": [[0,1,1.0],[1,2,2.0]], "pinning": [[0, 0.5]]}"#,
        )
        .unwrap();
        let g: WeightedGraph<f64> = s.build().unwrap();
        assert_eq!(g.n_edges(), 2);
        assert_eq!(s.pinning::<f64>().unwrap().unwrap(), vec![0.5, 0.0, 0.0]);
        let s = GraphSpec::from_json(r#"{"lattice": {"d": 2, "n": 1}}"#).unwrap();
        assert_eq!(s.build::<f64>().unwrap().n_vertices(), 9);
        assert!(GraphSpec::from_json(r#"{"lattice": {"d": 2, "n": 1, "bogus": 1}}"#).is_err());
        assert!(GraphSpec::from_json(r#"{"vertices": 2, "edges": [], "extra": 1}"#).is_err());
    }
}
