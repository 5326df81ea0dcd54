//! Differentiable graph layers built on the tape.
//!
//! Layers own no tensors. They hold [`ParamId`]s into a [`ParamStore`] and
//! record their computation through a [`Ctx`], which binds stored values to
//! tape variables on first use.

mod block;
mod gconv;
mod nonlocal;
mod norm;
mod transfer;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use block::ResidualBlock;
pub use gconv::{GConv, GConvKind};
pub use nonlocal::NonLocal;
pub use norm::BatchNorm;
pub use transfer::{Fusion, ScaleTransfer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(usize);

/// What a parameter is for; decides regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    /// Node-dimension map of a cross-scale transfer.
    NodeMap,
    /// Support logits of a semantic graph convolution.
    Attention,
    Bias,
    Gamma,
    Beta,
}

impl ParamRole {
    /// Whether max-norm row clipping applies.
    pub fn is_matrix_weight(self) -> bool {
        matches!(self, Self::Weight | Self::NodeMap)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Weight => "weight",
            Self::NodeMap => "node_map",
            Self::Attention => "attention",
            Self::Bias => "bias",
            Self::Gamma => "gamma",
            Self::Beta => "beta",
        }
    }
}

impl std::str::FromStr for ParamRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => Self::Weight,
            "node_map" => Self::NodeMap,
            "attention" => Self::Attention,
            "bias" => Self::Bias,
            "gamma" => Self::Gamma,
            "beta" => Self::Beta,
            other => return Err(Error::InvalidArgument(format!("unknown parameter role `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<S>,
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S: Scalar> {
    pub name: String,
    pub mean: Vec<S>,
    /// Unbiased running variance.
    pub var: Vec<S>,
    pub momentum: S,
}

impl<S: Scalar> RunningStats<S> {
    pub fn update(&mut self, stats: &BatchStats<S>) {
        let m = self.momentum;
        let n = stats.count as f64;
        let unbias = S::of(n / (n - 1.0));
        for c in 0..self.mean.len() {
            self.mean[c] = (S::one() - m) * self.mean[c] + m * stats.mean[c];
            self.var[c] = (S::one() - m) * self.var[c] + m * stats.var[c] * unbias;
        }
    }
}

/// Ordered collection of named learnable tensors plus non-learnable
/// running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f64> {
    params: Vec<Param<S>>,
    buffers: Vec<RunningStats<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, role, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize, momentum: S) -> BufferId {
        self.buffers.push(RunningStats {
            name: name.into(),
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
            momentum,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<S> {
        &self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[RunningStats<S>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.buffers
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Learnable scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    pub fn apply_batch_stats(&mut self, updates: &[(BufferId, BatchStats<S>)]) {
        for (id, stats) in updates {
            self.buffers[id.0].update(stats);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Glorot-uniform `rows × cols` matrix with fan-in `cols` and fan-out `rows`.
pub fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| S::of(rng.gen_range(-bound..=bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; running statistics are collected.
    Train,
    /// Running statistics; nothing is collected.
    Eval,
}

/// Per-graph constants shared by every layer on one scale.
#[derive(Clone, Debug)]
pub struct ScaleGraph<S: Scalar = f64> {
    n: usize,
    a_tilde: Tensor<S>,
    eye: Tensor<S>,
    mask: Arc<[bool]>,
    /// Flat indices of the support of `A + I`, row-major.
    support: Arc<[usize]>,
}

impl<S: Scalar> ScaleGraph<S> {
    pub fn new(g: &Graph) -> Self {
        let mask: Arc<[bool]> = g.support_mask().into();
        let support: Arc<[usize]> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Self {
            n: g.n_nodes(),
            a_tilde: normalize_adjacency(g).into_matrix(),
            eye: Tensor::eye(g.n_nodes()),
            mask,
            support,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn a_tilde(&self) -> &Tensor<S> {
        &self.a_tilde
    }

    pub fn mask(&self) -> &Arc<[bool]> {
        &self.mask
    }

    pub fn support(&self) -> &Arc<[usize]> {
        &self.support
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }
}

/// Recording context: a tape, the parameter values to bind, and the
/// normalization mode.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    store: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track: bool,
    stats: Vec<(BufferId, BatchStats<S>)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    /// Parameters are bound lazily; they require gradients when `track` is set.
    pub fn new(tape: &'a mut Tape<S>, store: &'a ParamStore<S>, mode: Mode, track: bool) -> Self {
        Self { tape, store, bound: vec![None; store.len()], mode, track, stats: Vec::new() }
    }

    /// Uses caller-provided variables, one per stored parameter in order.
    pub fn with_vars(tape: &'a mut Tape<S>, store: &'a ParamStore<S>, vars: &[Var], mode: Mode) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::LengthMismatch { expected: store.len(), found: vars.len() });
        }
        Ok(Self { tape, store, bound: vars.iter().copied().map(Some).collect(), mode, track: true, stats: Vec::new() })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    /// Variables bound so far, by parameter.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.tape.constant(value)
    }

    pub(crate) fn record_stats(&mut self, id: BufferId, stats: BatchStats<S>) {
        self.stats.push((id, stats));
    }

    /// Batch statistics collected by train-mode normalization so far.
    pub fn take_stats(&mut self) -> Vec<(BufferId, BatchStats<S>)> {
        std::mem::take(&mut self.stats)
    }

    /// `x · wᵀ` for a rank-3 `x` and an `out × in` weight.
    pub fn linear(&mut self, x: Var, w: ParamId) -> Result<Var> {
        let w = self.p(w);
        let wt = self.tape.transpose(w)?;
        self.tape.matmul(x, wt)
    }
}

pub(crate) fn check_nodes<S: Scalar>(tape: &Tape<S>, x: Var, n: usize, d: usize, op: &'static str) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 3 || s[1] != n || s[2] != d {
        return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![n, d] });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
