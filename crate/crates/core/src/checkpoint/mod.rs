//! Binary checkpoints.
//!
//! ```text
//! "HGNCKPT\0"  magic
//! u32          format version
//! u64          header length
//! [u8]         JSON header: config echo, model config, hierarchy levels,
//!              parameter and buffer layout, optimizer step
//! [f64]        parameters, running means and variances, Adam moments
//! [u8; 32]     SHA-256 of everything above
//! ```
//!
//! Integers and floats are little-endian. Values are always stored as `f64`.
//! The same model, optimizer and config always encode to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::io::{format_edge_list, parse_edge_list};
use crate::graph::{selected_checksum, SelectedLevel};
use crate::layers::ParamRole;
use crate::model::{Hgn, HgnConfig, ModelGraphs};
use crate::scalar::Scalar;
use crate::training::{AdamHyper, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Coarsening levels a model was built on, enough to rebuild its graphs
/// and recompute the hierarchy checksum.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredHierarchy {
    pub source_nodes: usize,
    pub selected: Vec<SelectedLevel>,
}

impl StoredHierarchy {
    pub fn checksum(&self) -> String {
        selected_checksum(self.source_nodes, &self.selected)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar = f64> {
    /// Effective run configuration, echoed verbatim.
    pub config: BTreeMap<String, String>,
    pub model: Hgn<S>,
    pub hierarchy: StoredHierarchy,
    pub optimizer: Option<AdamState<S>>,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
struct LevelHeader {
    target: usize,
    level: usize,
    edges: String,
    map: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    role: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    hyper: AdamHyper,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BTreeMap<String, String>,
    model: HgnConfig,
    source_nodes: usize,
    hierarchy_checksum: String,
    levels: Vec<LevelHeader>,
    params: Vec<TensorHeader>,
    buffers: Vec<BufferHeader>,
    optimizer: Option<OptimizerHeader>,
    epochs_done: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn hierarchy_checksum(&self) -> String {
        self.hierarchy.checksum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            config: self.config.clone(),
            model: self.model.config.clone(),
            source_nodes: self.hierarchy.source_nodes,
            hierarchy_checksum: self.hierarchy.checksum(),
            levels: self
                .hierarchy
                .selected
                .iter()
                .map(|s| LevelHeader {
                    target: s.target,
                    level: s.level,
                    edges: format_edge_list(&s.graph),
                    map: s.map_from_source.clone(),
                })
                .collect(),
            params: store
                .params()
                .iter()
                .map(|p| TensorHeader { name: p.name.clone(), role: p.role.as_str().into(), shape: p.value.shape().to_vec() })
                .collect(),
            buffers: store.buffers().iter().map(|b| BufferHeader { name: b.name.clone(), channels: b.mean.len() }).collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { step: o.step, hyper: o.hyper }),
            epochs_done: self.epochs_done,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[S]| xs.iter().for_each(|x| out.extend_from_slice(&x.as_f64().to_le_bytes()));
        for p in store.params() {
            put(p.value.data());
        }
        for b in store.buffers() {
            put(&b.mean);
            put(&b.var);
        }
        if let Some(o) = &self.optimizer {
            if o.m.len() != store.len() {
                return Err(Error::LengthMismatch { expected: store.len(), found: o.m.len() });
            }
            for t in o.m.iter().chain(&o.v) {
                put(t.data());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(Error::Checksum { expected: hex(digest), found: hex(&actual) });
        }
        let header_len = usize::try_from(u64::from_le_bytes(bytes[12..20].try_into().unwrap()))
            .map_err(|_| corrupt("header length overflow"))?;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header runs past end"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let mut floats = Floats { bytes: &body[header_end..] };

        let selected = header
            .levels
            .iter()
            .map(|l| {
                Ok(SelectedLevel { target: l.target, level: l.level, graph: parse_edge_list(&l.edges)?, map_from_source: l.map.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let hierarchy = StoredHierarchy { source_nodes: header.source_nodes, selected };
        if hierarchy.checksum() != header.hierarchy_checksum {
            return Err(Error::Checksum { expected: header.hierarchy_checksum, found: hierarchy.checksum() });
        }
        let mut model = Hgn::<S>::from_graphs(&header.model, ModelGraphs::from_selected(&hierarchy.selected)?)?;
        if model.store.len() != header.params.len() || model.store.buffers().len() != header.buffers.len() {
            return Err(corrupt("parameter layout does not match the model config"));
        }
        for (p, h) in model.store.params_mut().iter_mut().zip(&header.params) {
            let role: ParamRole = h.role.parse()?;
            if p.name != h.name || p.role != role || p.value.shape() != h.shape.as_slice() {
                return Err(corrupt(format!("parameter `{}` does not match the rebuilt model", h.name)));
            }
            floats.fill(p.value.data_mut())?;
        }
        for (b, h) in model.store.buffers_mut().iter_mut().zip(&header.buffers) {
            if b.name != h.name || b.mean.len() != h.channels {
                return Err(corrupt(format!("buffer `{}` does not match the rebuilt model", h.name)));
            }
            floats.fill(&mut b.mean)?;
            floats.fill(&mut b.var)?;
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut state = AdamState::new(&model.store, o.hyper);
                state.step = o.step;
                for t in state.m.iter_mut().chain(state.v.iter_mut()) {
                    floats.fill(t.data_mut())?;
                }
                Some(state)
            }
        };
        if !floats.bytes.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", floats.bytes.len())));
        }
        Ok(Self { config: header.config, model, hierarchy, optimizer, epochs_done: header.epochs_done })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Floats<'a> {
    bytes: &'a [u8],
}

impl Floats<'_> {
    fn fill<S: Scalar>(&mut self, out: &mut [S]) -> Result<()> {
        let need = out.len() * 8;
        if self.bytes.len() < need {
            return Err(corrupt("value section ends early"));
        }
        let (head, rest) = self.bytes.split_at(need);
        for (o, c) in out.iter_mut().zip(head.chunks_exact(8)) {
            *o = S::of(f64::from_le_bytes(c.try_into().unwrap()));
        }
        self.bytes = rest;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
