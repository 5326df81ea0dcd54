//! The hierarchical graph network: a skeleton subnetwork plus one or two
//! mesh subnetworks running in parallel, exchanging features after every
//! stage.
//!
//! Stages run one residual block on every active subnetwork. A subnetwork
//! with `b` blocks joins at stage `stages - b + 1`, seeded by transfers from
//! the already active ones. Output heads read the features after the last
//! fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::skeleton::N_JOINTS;
use crate::graph::{build_skeleton_graph, CoarseningHierarchy, Graph, SelectedLevel};
use crate::layers::{BatchNorm, Ctx, Fusion, GConv, GConvKind, Mode, ParamStore, ResidualBlock, ScaleGraph, ScaleTransfer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Without the 96-node subnetwork; the second subnetwork runs on the
    /// 96-node graph instead of the 48-node one.
    NoTop,
    /// Without the 96-node subnetwork; the second subnetwork stays on 48 nodes.
    NoMidCoarsest,
    /// Skeleton subnetwork only.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoTop, Variant::NoMidCoarsest, Variant::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoTop => "no_top",
            Self::NoMidCoarsest => "no_mid_coarsest",
            Self::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_top" => Ok(Self::NoTop),
            "no_mid_coarsest" => Ok(Self::NoMidCoarsest),
            "baseline" | "baseline_single_scale" => Ok(Self::Baseline),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Which target a subnetwork's head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Pose,
    /// The coarsest mesh (about 48 vertices).
    MeshMid,
    /// The next finer mesh (about 96 vertices).
    MeshTop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgnConfig {
    pub channels: usize,
    pub gconv_kind: GConvKind,
    /// Residual blocks of the skeleton, 48-node and 96-node subnetworks.
    pub blocks_per_scale: [usize; 3],
    /// Expected `[17, mid, top]` node counts; checked against the hierarchy
    /// when present.
    pub scale_node_counts: Option<[usize; 3]>,
    pub top_scale_join_stage: usize,
    pub variant: Variant,
    /// Adds a channel transform to every cross-scale transfer.
    pub transfer_channel_maps: bool,
    pub seed: u64,
}

impl Default for HgnConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            gconv_kind: GConvKind::Semantic,
            blocks_per_scale: [4, 4, 2],
            scale_node_counts: None,
            top_scale_join_stage: 3,
            variant: Variant::Full,
            transfer_channel_maps: false,
            seed: 0,
        }
    }
}

impl HgnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::Config(format!("channels must be at least 8, got {}", self.channels)));
        }
        let [b0, b1, b2] = self.blocks_per_scale;
        if b0 == 0 || b1 > b0 || b2 > b0 {
            return Err(Error::Config(format!("blocks_per_scale {:?} must not exceed the skeleton's", self.blocks_per_scale)));
        }
        if b2 > 0 && self.top_scale_join_stage != b0 - b2 + 1 {
            return Err(Error::Config(format!(
                "top scale joining at stage {} cannot run {b2} blocks in {b0} stages",
                self.top_scale_join_stage
            )));
        }
        Ok(())
    }
}

/// The three graphs a model runs on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraphs {
    pub skeleton: Graph,
    /// Coarsest mesh level (~48 nodes).
    pub mesh_mid: Graph,
    /// Next finer mesh level (~96 nodes).
    pub mesh_top: Graph,
}

impl ModelGraphs {
    /// Takes the two selected levels of a hierarchy, larger first.
    pub fn from_hierarchy(h: &CoarseningHierarchy) -> Result<Self> {
        Self::from_selected(&h.selected)
    }

    pub fn from_selected(selected: &[SelectedLevel]) -> Result<Self> {
        let [top, mid] = selected else {
            return Err(Error::InvalidArgument(format!(
                "model needs a hierarchy with exactly two selected levels, got {}",
                selected.len()
            )));
        };
        Ok(Self { skeleton: build_skeleton_graph(), mesh_mid: mid.graph.clone(), mesh_top: top.graph.clone() })
    }
}

#[derive(Clone, Debug)]
struct Subnet<S: Scalar> {
    output: Output,
    graph: ScaleGraph<S>,
    join: usize,
    blocks: Vec<ResidualBlock>,
    /// Transfers from earlier subnetworks that produce this one's first input.
    seeds: Vec<(usize, ScaleTransfer)>,
    head: GConv,
}

/// Head outputs; mesh entries are absent when the variant has no such head.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    pub pose: Var,
    pub mesh_mid: Option<Var>,
    pub mesh_top: Option<Var>,
}

/// Evaluated outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S: Scalar = f64> {
    pub pose: Tensor<S>,
    pub mesh_mid: Option<Tensor<S>>,
    pub mesh_top: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct Hgn<S: Scalar = f64> {
    pub config: HgnConfig,
    pub store: ParamStore<S>,
    graphs: ModelGraphs,
    pre: GConv,
    pre_bn: BatchNorm,
    subnets: Vec<Subnet<S>>,
    fusions: Vec<Fusion>,
}

impl<S: Scalar> Hgn<S> {
    pub fn build(config: &HgnConfig, hierarchy: &CoarseningHierarchy) -> Result<Self> {
        Self::from_graphs(config, ModelGraphs::from_hierarchy(hierarchy)?)
    }

    pub fn from_graphs(config: &HgnConfig, graphs: ModelGraphs) -> Result<Self> {
        config.validate()?;
        if graphs.skeleton.n_nodes() != N_JOINTS {
            return Err(Error::NodeCountMismatch { expected: N_JOINTS, found: graphs.skeleton.n_nodes() });
        }
        if let Some([s, m, t]) = config.scale_node_counts {
            for (expected, g) in [(s, &graphs.skeleton), (m, &graphs.mesh_mid), (t, &graphs.mesh_top)] {
                if g.n_nodes() != expected {
                    return Err(Error::NodeCountMismatch { expected, found: g.n_nodes() });
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, kind) = (config.channels, config.gconv_kind);
        let [b0, b1, b2] = config.blocks_per_scale;
        let plan: Vec<(Output, &Graph, usize)> = match config.variant {
            Variant::Full => vec![
                (Output::Pose, &graphs.skeleton, b0),
                (Output::MeshMid, &graphs.mesh_mid, b1),
                (Output::MeshTop, &graphs.mesh_top, b2),
            ],
            Variant::NoTop => vec![(Output::Pose, &graphs.skeleton, b0), (Output::MeshTop, &graphs.mesh_top, b1)],
            Variant::NoMidCoarsest => {
                vec![(Output::Pose, &graphs.skeleton, b0), (Output::MeshMid, &graphs.mesh_mid, b1)]
            }
            Variant::Baseline => vec![(Output::Pose, &graphs.skeleton, b0)],
        };
        let stages = b0;
        let channel_maps = config.transfer_channel_maps.then_some(c);

        let skeleton = ScaleGraph::new(&graphs.skeleton);
        let pre = GConv::new(&mut store, "pre.gconv", kind, 2, c, &skeleton, false, &mut rng);
        let pre_bn = BatchNorm::new(&mut store, "pre.bn", c);

        let mut subnets: Vec<Subnet<S>> = Vec::new();
        for &(output, graph, blocks) in &plan {
            if blocks == 0 {
                continue;
            }
            let s = subnets.len();
            let sg = ScaleGraph::new(&graph.unweighted());
            let join = stages - blocks + 1;
            let seeds = subnets
                .iter()
                .enumerate()
                .filter(|(_, prev)| prev.join <= join)
                .map(|(i, prev)| {
                    let name = format!("seed.{i}to{s}");
                    (i, ScaleTransfer::new(&mut store, &name, prev.graph.n(), sg.n(), channel_maps, &mut rng))
                })
                .collect();
            let blocks = (0..blocks)
                .map(|b| ResidualBlock::new(&mut store, &format!("sub{s}.block{b}"), kind, c, &sg, &mut rng))
                .collect();
            let head = GConv::new(&mut store, &format!("head{s}"), kind, c, 3, &sg, true, &mut rng);
            subnets.push(Subnet { output, graph: sg, join, blocks, seeds, head });
        }

        let mut fusions = Vec::with_capacity(stages);
        for stage in 1..=stages {
            let active: Vec<(usize, usize)> =
                subnets.iter().enumerate().filter(|(_, s)| s.join <= stage).map(|(i, s)| (i, s.graph.n())).collect();
            fusions.push(Fusion::new(&mut store, &format!("fuse{stage}"), &active, channel_maps, &mut rng));
        }
        Ok(Self { config: config.clone(), store, graphs, pre, pre_bn, subnets, fusions })
    }

    pub fn graphs(&self) -> &ModelGraphs {
        &self.graphs
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn outputs(&self) -> Vec<Output> {
        self.subnets.iter().map(|s| s.output).collect()
    }

    /// Node count of each subnetwork's graph.
    pub fn scale_sizes(&self) -> Vec<usize> {
        self.subnets.iter().map(|s| s.graph.n()).collect()
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, S>, x2d: Var) -> Result<ModelOutputs> {
        let shape = ctx.tape.value(x2d).shape();
        if shape.len() != 3 || shape[1] != N_JOINTS || shape[2] != 2 {
            return Err(Error::ShapeMismatch { op: "hgn input", lhs: shape.to_vec(), rhs: vec![N_JOINTS, 2] });
        }
        let h = self.pre.forward(ctx, x2d, &self.subnets[0].graph)?;
        let h = self.pre_bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;

        let mut active: Vec<(usize, Var)> = vec![(0, h)];
        for (stage_ix, fusion) in self.fusions.iter().enumerate() {
            let stage = stage_ix + 1;
            for (s, sub) in self.subnets.iter().enumerate().skip(1) {
                if sub.join != stage {
                    continue;
                }
                let mut acc: Option<Var> = None;
                for (from, transfer) in &sub.seeds {
                    let x = active.iter().find(|(i, _)| i == from).map(|&(_, v)| v).ok_or(Error::MissingTransfer {
                        from: *from,
                        to: s,
                    })?;
                    let y = transfer.forward(ctx, x)?;
                    acc = Some(match acc {
                        Some(a) => ctx.tape.add(a, y)?,
                        None => y,
                    });
                }
                let seeded = acc.ok_or(Error::MissingTransfer { from: 0, to: s })?;
                active.push((s, seeded));
            }
            let mut next = Vec::with_capacity(active.len());
            for &(s, x) in &active {
                let sub = &self.subnets[s];
                let y = sub.blocks[stage - sub.join].forward(ctx, x, &sub.graph)?;
                next.push((s, y));
            }
            active = fusion.forward(ctx, &next)?;
        }

        let mut out = ModelOutputs { pose: active[0].1, mesh_mid: None, mesh_top: None };
        for &(s, x) in &active {
            let sub = &self.subnets[s];
            let y = sub.head.forward(ctx, x, &sub.graph)?;
            match sub.output {
                Output::Pose => out.pose = y,
                Output::MeshMid => out.mesh_mid = Some(y),
                Output::MeshTop => out.mesh_top = Some(y),
            }
        }
        Ok(out)
    }

    /// Eval-mode forward on concrete input; no state changes.
    pub fn predict(&self, x2d: &Tensor<S>) -> Result<Prediction<S>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, false);
        let x = ctx.constant(x2d.clone());
        let out = self.forward(&mut ctx, x)?;
        let value = |v: Var| ctx.tape.value(v).clone();
        Ok(Prediction {
            pose: value(out.pose),
            mesh_mid: out.mesh_mid.map(value),
            mesh_top: out.mesh_top.map(value),
        })
    }

    /// Names of the parameters belonging to one output's subnetwork, its
    /// head, and every transfer touching it.
    pub fn subnet_param_names(&self, output: Output) -> Vec<String> {
        let Some(s) = self.subnets.iter().position(|sub| sub.output == output) else { return Vec::new() };
        let sub_prefix = format!("sub{s}.");
        let head = format!("head{s}.");
        let to = format!("to{s}.");
        let from = format!(".{s}to");
        self.store
            .params()
            .iter()
            .filter(|p| {
                p.name.starts_with(&sub_prefix) || p.name.starts_with(&head) || p.name.contains(&to) || p.name.contains(&from)
            })
            .map(|p| p.name.clone())
            .collect()
    }
}

/// Builds one ablation variant of `config`.
pub fn build_ablation<S: Scalar>(config: &HgnConfig, variant: Variant, hierarchy: &CoarseningHierarchy) -> Result<Hgn<S>> {
    let config = HgnConfig { variant, ..config.clone() };
    Hgn::build(&config, hierarchy)
}

#[cfg(test)]
mod tests;
