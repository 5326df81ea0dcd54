//! Undirected weighted graphs, skeleton topology, normalization and
//! multilevel coarsening.

mod coarsen;
pub mod io;
mod mesh;
pub mod skeleton;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use coarsen::{
    build_hierarchy, compose_maps, hem_coarsen_capped, hem_coarsen_once, hem_coarsen_with_order, pool_positions, build_hierarchy_with,
    CoarseningHierarchy, CoarseningLevel, HemScore, SelectedLevel,
};
pub use mesh::{build_synthetic_body_mesh, BodyMesh, VertexAnchor};
pub use skeleton::build_skeleton_graph;
pub use io::{hierarchy_checksum, selected_checksum};

/// Undirected graph with positive edge weights; each edge stored once with
/// `i < j`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
    node_names: Option<Vec<String>>,
}

impl Graph {
    /// Builds a graph, normalizing edge orientation and rejecting duplicates,
    /// self-loops, out-of-range endpoints and non-positive weights.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut map = BTreeMap::new();
        for (a, b, w) in edges {
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop on node {i}")));
            }
            if j >= n_nodes {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) out of range for {n_nodes} nodes")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) has non-positive weight {w}")));
            }
            if map.insert((i, j), w).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(Self { n_nodes, edges: map.into_iter().map(|((i, j), w)| (i, j, w)).collect(), node_names: None })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_nodes {
            return Err(Error::LengthMismatch { expected: self.n_nodes, found: names.len() });
        }
        self.node_names = Some(names);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn node_names(&self) -> Option<&[String]> {
        self.node_names.as_deref()
    }

    /// Neighbor lists `(neighbor, weight)` sorted by neighbor index.
    pub fn adjacency_lists(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(i, j, w) in &self.edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(v, _)| v);
        }
        adj
    }

    /// Number of incident edges per node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &(i, j, _) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// Sum of incident edge weights per node.
    pub fn weighted_degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_nodes];
        for &(i, j, w) in &self.edges {
            d[i] += w;
            d[j] += w;
        }
        d
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }

    /// Same topology with every weight set to one.
    pub fn unweighted(&self) -> Self {
        Self {
            n_nodes: self.n_nodes,
            edges: self.edges.iter().map(|&(i, j, _)| (i, j, 1.0)).collect(),
            node_names: self.node_names.clone(),
        }
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n_nodes).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = self.n_nodes;
        for &(i, j, _) in &self.edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
                count -= 1;
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.components() == 1
    }

    /// Row-major flags for `A + I` (edges plus self-loops).
    pub fn support_mask(&self) -> Vec<bool> {
        let n = self.n_nodes;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(i, j, _) in &self.edges {
            mask[i * n + j] = true;
            mask[j * n + i] = true;
        }
        mask
    }
}

/// Symmetrically normalized adjacency `D^{-1/2}(A + I)D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency<S: Scalar = f64> {
    matrix: Tensor<S>,
}

impl<S: Scalar> NormalizedAdjacency<S> {
    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn into_matrix(self) -> Tensor<S> {
        self.matrix
    }
}

/// Adds unit self-loops and applies symmetric degree normalization.
pub fn normalize_adjacency<S: Scalar>(g: &Graph) -> NormalizedAdjacency<S> {
    let n = g.n_nodes();
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j, w) in g.edges() {
        a[i * n + j] = w;
        a[j * n + i] = w;
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt()).collect();
    let data = (0..n * n).map(|k| S::of(a[k] * inv_sqrt[k / n] * inv_sqrt[k % n])).collect();
    NormalizedAdjacency { matrix: Tensor::new([n, n], data).expect("square") }
}
