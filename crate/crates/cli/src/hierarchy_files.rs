//! On-disk coarsening hierarchies.
//!
//! A hierarchy directory holds `source.edges`, one `level_<c>.edges` and
//! `level_<c>.map` per pass (the map sends level `c-1` nodes to level `c`
//! nodes), and `summary.json`. Text files start with a `# config:` comment
//! line, which the edge-list and cluster-map parsers skip.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hgn_core::graph::io::{format_cluster_map, format_edge_list, parse_cluster_map, parse_edge_list};
use hgn_core::graph::{compose_maps, hierarchy_checksum, CoarseningHierarchy, CoarseningLevel, SelectedLevel};
use hgn_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedSummary {
    pub target: usize,
    pub level: usize,
    pub nodes: usize,
    pub edges: usize,
    pub connected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchySummary {
    pub source_nodes: usize,
    /// Node count after each pass, source first.
    pub sizes: Vec<usize>,
    /// `sizes[c] / sizes[c - 1]`.
    pub ratios: Vec<f64>,
    pub selected: Vec<SelectedSummary>,
    pub checksum: String,
    pub config: BTreeMap<String, String>,
}

pub fn summarize(h: &CoarseningHierarchy, config: &BTreeMap<String, String>) -> HierarchySummary {
    let sizes = h.sizes();
    HierarchySummary {
        source_nodes: h.source.n_nodes(),
        ratios: sizes.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect(),
        sizes,
        selected: h
            .selected
            .iter()
            .map(|s| SelectedSummary {
                target: s.target,
                level: s.level,
                nodes: s.graph.n_nodes(),
                edges: s.graph.edges().len(),
                connected: s.graph.is_connected(),
            })
            .collect(),
        checksum: hierarchy_checksum(h),
        config: config.clone(),
    }
}

pub fn config_comment(config: &BTreeMap<String, String>) -> String {
    format!("# config: {}\n", serde_json::to_string(config).expect("string map serializes"))
}

pub fn save_hierarchy(h: &CoarseningHierarchy, dir: &Path, config: &BTreeMap<String, String>) -> Result<HierarchySummary> {
    fs::create_dir_all(dir)?;
    let head = config_comment(config);
    fs::write(dir.join("source.edges"), head.clone() + &format_edge_list(&h.source))?;
    for (i, level) in h.levels.iter().enumerate() {
        let c = i + 1;
        fs::write(dir.join(format!("level_{c}.edges")), head.clone() + &format_edge_list(&level.graph))?;
        fs::write(dir.join(format!("level_{c}.map")), head.clone() + &format_cluster_map(&level.cluster_map))?;
    }
    let summary = summarize(h, config);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Reads a hierarchy directory and checks it against its summary.
pub fn load_hierarchy(dir: &Path) -> Result<CoarseningHierarchy> {
    let summary: HierarchySummary = serde_json::from_str(&read(&dir.join("summary.json"))?)?;
    let source = parse_edge_list(&read(&dir.join("source.edges"))?)?;
    let mut levels = Vec::with_capacity(summary.sizes.len().saturating_sub(1));
    for c in 1..summary.sizes.len() {
        let graph = parse_edge_list(&read(&dir.join(format!("level_{c}.edges")))?)?;
        let cluster_map = parse_cluster_map(&read(&dir.join(format!("level_{c}.map")))?)?;
        levels.push(CoarseningLevel { graph, cluster_map });
    }
    let mut selected = Vec::with_capacity(summary.selected.len());
    for s in &summary.selected {
        if s.level > levels.len() {
            return Err(Error::Corrupt(format!("selected level {} beyond {} stored passes", s.level, levels.len())));
        }
        let mut map: Vec<usize> = (0..source.n_nodes()).collect();
        for l in &levels[..s.level] {
            if l.cluster_map.len() != map.iter().max().map_or(0, |m| m + 1) {
                return Err(Error::Corrupt("cluster maps do not chain".into()));
            }
            map = compose_maps(&map, &l.cluster_map);
        }
        let graph = if s.level == 0 { source.clone() } else { levels[s.level - 1].graph.clone() };
        selected.push(SelectedLevel { target: s.target, level: s.level, graph, map_from_source: map });
    }
    let h = CoarseningHierarchy { source, levels, selected };
    let found = hierarchy_checksum(&h);
    if found != summary.checksum {
        return Err(Error::Checksum { expected: summary.checksum, found });
    }
    Ok(h)
}
