use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{glorot, Ctx, ParamId, ParamRole, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learned map between scales: `node_map · x`, optionally followed by a
/// per-node channel transform.
#[derive(Clone, Debug)]
pub struct ScaleTransfer {
    pub n_from: usize,
    pub n_to: usize,
    pub node_map: ParamId,
    pub channel_map: Option<ParamId>,
}

impl ScaleTransfer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        n_from: usize,
        n_to: usize,
        channels: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let node_map = store.add(format!("{name}.node_map"), ParamRole::NodeMap, glorot(n_to, n_from, rng));
        let channel_map =
            channels.map(|d| store.add(format!("{name}.channel_map"), ParamRole::Weight, glorot(d, d, rng)));
        Self { n_from, n_to, node_map, channel_map }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let s = ctx.tape.value(x).shape();
        if s.len() != 3 || s[1] != self.n_from {
            return Err(Error::ShapeMismatch { op: "scale_transfer", lhs: s.to_vec(), rhs: vec![self.n_from] });
        }
        let m = ctx.p(self.node_map);
        let y = ctx.tape.matmul(m, x)?;
        match self.channel_map {
            Some(c) => ctx.linear(y, c),
            None => Ok(y),
        }
    }
}

/// Exchange among active scales: `Y_k = X_k + Σ_{i≠k} transfer_{i→k}(X_i)`.
///
/// Node maps start at zero so a fresh fusion is the identity; without that
/// every stage roughly doubles the activation scale of the trunk.
#[derive(Clone, Debug, Default)]
pub struct Fusion {
    pub transfers: BTreeMap<(usize, usize), ScaleTransfer>,
}

impl Fusion {
    /// All pairwise transfers among `scales`, given as `(scale id, nodes)`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        scales: &[(usize, usize)],
        channels: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut transfers = BTreeMap::new();
        for &(i, ni) in scales {
            for &(k, nk) in scales {
                if i != k {
                    let t = ScaleTransfer::new(store, &format!("{name}.{i}to{k}"), ni, nk, channels, rng);
                    let map = &mut store.get_mut(t.node_map).value;
                    *map = Tensor::zeros(map.shape());
                    transfers.insert((i, k), t);
                }
            }
        }
        Self { transfers }
    }

    /// `xs` holds `(scale id, features)` for every active scale; the output
    /// keeps the same order.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, xs: &[(usize, Var)]) -> Result<Vec<(usize, Var)>> {
        let mut out = Vec::with_capacity(xs.len());
        for &(k, xk) in xs {
            let mut acc = xk;
            for &(i, xi) in xs {
                if i == k {
                    continue;
                }
                let t = self.transfers.get(&(i, k)).ok_or(Error::MissingTransfer { from: i, to: k })?;
                let y = t.forward(ctx, xi)?;
                acc = ctx.tape.add(acc, y)?;
            }
            out.push((k, acc));
        }
        Ok(out)
    }
}
