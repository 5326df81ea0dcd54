//! Plain-text edge lists and cluster maps.
//!
//! ```text
//! nodes 4
//! 0 1 1
//! 1 2 0.5
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Cluster maps hold one
//! coarse index per line.

use std::fmt::Write as _;

use super::Graph;
use crate::error::{Error, Result};

fn significant(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn parse_edge_list(text: &str) -> Result<Graph> {
    let mut lines = significant(text);
    let (line, header) = lines.next().ok_or_else(|| parse_err(1, "missing `nodes <N>` header"))?;
    let n: usize = match header.split_whitespace().collect::<Vec<_>>()[..] {
        ["nodes", n] => n.parse().map_err(|_| parse_err(line, format!("bad node count `{n}`")))?,
        _ => return Err(parse_err(line, "expected `nodes <N>`")),
    };
    let mut edges = Vec::new();
    for (line, l) in lines {
        let parts: Vec<&str> = l.split_whitespace().collect();
        let [i, j, w] = parts[..] else {
            return Err(parse_err(line, format!("expected `i j w`, got `{l}`")));
        };
        let i: usize = i.parse().map_err(|_| parse_err(line, format!("bad node index `{i}`")))?;
        let j: usize = j.parse().map_err(|_| parse_err(line, format!("bad node index `{j}`")))?;
        let w: f64 = w.parse().map_err(|_| parse_err(line, format!("bad weight `{w}`")))?;
        if i.max(j) >= n {
            return Err(parse_err(line, format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        edges.push((i, j, w));
    }
    Graph::new(n, edges)
}

pub fn format_edge_list(g: &Graph) -> String {
    let mut out = format!("nodes {}\n", g.n_nodes());
    for &(i, j, w) in g.edges() {
        writeln!(out, "{i} {j} {w}").unwrap();
    }
    out
}

pub fn parse_cluster_map(text: &str) -> Result<Vec<usize>> {
    significant(text)
        .map(|(line, l)| l.parse().map_err(|_| parse_err(line, format!("bad cluster index `{l}`"))))
        .collect()
}

pub fn format_cluster_map(map: &[usize]) -> String {
    let mut out = String::with_capacity(map.len() * 4);
    for c in map {
        writeln!(out, "{c}").unwrap();
    }
    out
}

/// SHA-256 over the selected levels (graphs and composed maps), hex encoded.
/// Datasets and checkpoints record it so mismatched pairs are caught.
pub fn hierarchy_checksum(h: &super::CoarseningHierarchy) -> String {
    selected_checksum(h.source.n_nodes(), &h.selected)
}

/// [`hierarchy_checksum`] from the source size and selected levels alone.
pub fn selected_checksum(source_nodes: usize, selected: &[super::SelectedLevel]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(format!("source {source_nodes}\n"));
    for s in selected {
        hasher.update(format!("level {} target {}\n", s.level, s.target));
        hasher.update(format_edge_list(&s.graph));
        hasher.update(format_cluster_map(&s.map_from_source));
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
