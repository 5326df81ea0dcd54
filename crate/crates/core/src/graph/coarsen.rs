//! Heavy-edge-matching coarsening and cluster pooling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest node-count ratio a steered pass may produce.
const MAX_LEVEL_RATIO: f64 = 0.6;

/// Edge score maximized by the greedy matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HemScore {
    /// `w_ij · (1/d_i + 1/d_j)` with weighted degrees.
    #[default]
    NormalizedCut,
    /// Plain edge weight `w_ij`.
    Weight,
}

impl std::str::FromStr for HemScore {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized_cut" | "ncut" => Ok(Self::NormalizedCut),
            "weight" => Ok(Self::Weight),
            other => Err(Error::Config(format!("unknown HEM score `{other}`"))),
        }
    }
}

/// One coarsening pass: the coarse graph and the fine → coarse node map.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseningLevel {
    pub graph: Graph,
    pub cluster_map: Vec<usize>,
}

impl CoarseningLevel {
    pub fn n_fine(&self) -> usize {
        self.cluster_map.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Number of fine nodes merged into each coarse node.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_coarse()];
        for &c in &self.cluster_map {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Full HEM pass with a seeded uniformly random visit order.
pub fn hem_coarsen_once(g: &Graph, seed: u64) -> Result<CoarseningLevel> {
    hem_coarsen_capped(g, seed, 1, HemScore::NormalizedCut)
}

/// HEM pass that stops matching once the coarse graph would have
/// `min_nodes` nodes.
pub fn hem_coarsen_capped(g: &Graph, seed: u64, min_nodes: usize, score: HemScore) -> Result<CoarseningLevel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = random_order(g.n_nodes(), &mut rng);
    hem_coarsen_with_order(g, &order, min_nodes, score)
}

fn random_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Greedy matching in the given visit order. Each unmatched node pairs with
/// its best-scoring unmatched neighbor (first in index order on ties);
/// coarse node ids follow the smallest fine member.
pub fn hem_coarsen_with_order(g: &Graph, order: &[usize], min_nodes: usize, score: HemScore) -> Result<CoarseningLevel> {
    let n = g.n_nodes();
    if n < 2 {
        return Err(Error::Degenerate(format!("coarsening needs at least 2 nodes, got {n}")));
    }
    if order.len() != n {
        return Err(Error::LengthMismatch { expected: n, found: order.len() });
    }
    let adj = g.adjacency_lists();
    let deg = g.weighted_degrees();
    let mut mate: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut count = n;
    for &u in order {
        if count <= min_nodes {
            break;
        }
        if visited[u] {
            continue;
        }
        visited[u] = true;
        let mut best: Option<(usize, f64)> = None;
        for &(v, w) in &adj[u] {
            if visited[v] {
                continue;
            }
            let s = match score {
                HemScore::NormalizedCut => w * (1.0 / deg[u] + 1.0 / deg[v]),
                HemScore::Weight => w,
            };
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((v, s));
            }
        }
        if let Some((v, _)) = best {
            visited[v] = true;
            mate[u] = Some(v);
            mate[v] = Some(u);
            count -= 1;
        }
    }

    let mut cluster_map = vec![usize::MAX; n];
    let mut next = 0;
    for u in 0..n {
        if cluster_map[u] != usize::MAX {
            continue;
        }
        cluster_map[u] = next;
        if let Some(v) = mate[u] {
            cluster_map[v] = next;
        }
        next += 1;
    }
    let graph = contract(g, &cluster_map, next)?;
    Ok(CoarseningLevel { graph, cluster_map })
}

/// Coarse graph whose edge weights sum the fine weights between clusters.
fn contract(g: &Graph, cluster_map: &[usize], n_coarse: usize) -> Result<Graph> {
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(i, j, w) in g.edges() {
        let (a, b) = (cluster_map[i], cluster_map[j]);
        if a != b {
            *acc.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
        }
    }
    Graph::new(n_coarse, acc.into_iter().map(|((a, b), w)| (a, b, w)))
}

/// `result[i] = second[first[i]]`.
pub fn compose_maps(first: &[usize], second: &[usize]) -> Vec<usize> {
    first.iter().map(|&c| second[c]).collect()
}

/// A level picked for one requested target size.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedLevel {
    pub target: usize,
    /// Number of passes applied to the source to reach this level.
    pub level: usize,
    pub graph: Graph,
    pub map_from_source: Vec<usize>,
}

/// Chain of HEM passes from a source graph plus the levels chosen for each
/// target size.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseningHierarchy {
    pub source: Graph,
    pub levels: Vec<CoarseningLevel>,
    pub selected: Vec<SelectedLevel>,
}

impl CoarseningHierarchy {
    /// Node counts from the source through every pass.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.source.n_nodes()).chain(self.levels.iter().map(CoarseningLevel::n_coarse)).collect()
    }

    pub fn selected_sizes(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.graph.n_nodes()).collect()
    }

    /// Graph after `level` passes (0 is the source).
    pub fn graph_at(&self, level: usize) -> &Graph {
        if level == 0 {
            &self.source
        } else {
            &self.levels[level - 1].graph
        }
    }
}

/// Repeatedly coarsens `g` and selects the level closest to each target.
///
/// Pass sizes are steered so the chain approaches each target geometrically
/// with per-pass ratios no larger than 0.6: a pass stops matching once it
/// reaches its planned size. Once a pass lands within one such ratio of the
/// current target the chain moves on to the next one.
pub fn build_hierarchy(g: &Graph, targets: &[usize], seed: u64) -> Result<CoarseningHierarchy> {
    build_hierarchy_with(g, targets, seed, HemScore::NormalizedCut)
}

pub fn build_hierarchy_with(g: &Graph, targets: &[usize], seed: u64, score: HemScore) -> Result<CoarseningHierarchy> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("at least one target size is required".into()));
    }
    if targets.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(format!("targets must be strictly decreasing: {targets:?}")));
    }
    if targets[0] >= g.n_nodes() || targets[targets.len() - 1] == 0 {
        return Err(Error::InvalidArgument(format!(
            "targets {targets:?} must lie in 1..{} (source node count)",
            g.n_nodes()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels: Vec<CoarseningLevel> = Vec::new();
    let mut current = g.clone();
    'targets: for &t in targets {
        let mut passes = 0;
        while current.n_nodes() > t && current.n_nodes() >= 2 {
            let n = current.n_nodes();
            let ratio = t as f64 / n as f64;
            if ratio > MAX_LEVEL_RATIO && passes > 0 {
                break;
            }
            let steps = ((ratio.ln() / MAX_LEVEL_RATIO.ln()).floor() as i64).max(1);
            let goal = ratio.powf(1.0 / steps as f64);
            let cap = ((n as f64 * goal).floor() as usize).max(t);
            let order = random_order(n, &mut rng);
            let level = hem_coarsen_with_order(&current, &order, cap, score)?;
            if level.n_coarse() == n {
                break 'targets;
            }
            current = level.graph.clone();
            levels.push(level);
            passes += 1;
        }
    }

    let sizes: Vec<usize> = std::iter::once(g.n_nodes()).chain(levels.iter().map(CoarseningLevel::n_coarse)).collect();
    let mut selected = Vec::with_capacity(targets.len());
    for &t in targets {
        let (best, &size) = sizes
            .iter()
            .enumerate()
            .min_by_key(|&(i, &s)| (s.abs_diff(t), i))
            .expect("source level always present");
        if size * 2 < t || size > 2 * t {
            return Err(Error::UnreachableTarget { target: t, closest: size });
        }
        let mut map: Vec<usize> = (0..g.n_nodes()).collect();
        for level in &levels[..best] {
            map = compose_maps(&map, &level.cluster_map);
        }
        let graph = if best == 0 { g.clone() } else { levels[best - 1].graph.clone() };
        selected.push(SelectedLevel { target: t, level: best, graph, map_from_source: map });
    }
    Ok(CoarseningHierarchy { source: g.clone(), levels, selected })
}

/// Centroid of the fine rows assigned to each coarse node.
pub fn pool_positions<S: Scalar>(cluster_map: &[usize], positions: &Tensor<S>) -> Result<Tensor<S>> {
    if positions.rank() != 2 {
        return Err(Error::ShapeMismatch { op: "pool_positions", lhs: positions.shape().to_vec(), rhs: vec![] });
    }
    let (rows, width) = (positions.shape()[0], positions.shape()[1]);
    if rows != cluster_map.len() {
        return Err(Error::LengthMismatch { expected: cluster_map.len(), found: rows });
    }
    let n_coarse = cluster_map.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![S::zero(); n_coarse * width];
    let mut counts = vec![0usize; n_coarse];
    for (i, &c) in cluster_map.iter().enumerate() {
        counts[c] += 1;
        for k in 0..width {
            sums[c * width + k] += positions.data()[i * width + k];
        }
    }
    for c in 0..n_coarse {
        if counts[c] == 0 {
            return Err(Error::Degenerate(format!("coarse node {c} has no members")));
        }
        let inv = S::one() / S::of(counts[c] as f64);
        for k in 0..width {
            sums[c * width + k] *= inv;
        }
    }
    Tensor::new([n_coarse, width], sums)
}
