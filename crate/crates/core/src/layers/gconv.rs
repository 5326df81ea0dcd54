use rand_chacha::ChaCha8Rng;

use super::{check_nodes, glorot, Ctx, ParamId, ParamRole, ParamStore, ScaleGraph};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GConvKind {
    /// Fixed normalized adjacency with one shared transform.
    Vanilla,
    /// Learned support weights with separate self and neighbor transforms.
    #[default]
    Semantic,
}

impl GConvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Semantic => "semantic",
        }
    }
}

impl std::str::FromStr for GConvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "semantic" => Ok(Self::Semantic),
            other => Err(Error::Config(format!("unknown gconv kind `{other}`"))),
        }
    }
}

/// Graph convolution on one scale. Activation is left to the caller, and the
/// bias is optional since a following batch norm would cancel it.
///
/// Vanilla: `Ã·x·Wᵀ + b`.
/// Semantic: with `M = softmax` of `T` over the support of `A + I`,
/// `diag(M)·x·W_selfᵀ + offdiag(M)·x·W_neighᵀ + b`.
#[derive(Clone, Debug)]
pub struct GConv {
    pub kind: GConvKind,
    pub d_in: usize,
    pub d_out: usize,
    pub n: usize,
    pub w_self: ParamId,
    pub w_neigh: Option<ParamId>,
    pub t: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl GConv {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: GConvKind,
        d_in: usize,
        d_out: usize,
        graph: &ScaleGraph<S>,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w_self, w_neigh, t) = match kind {
            GConvKind::Vanilla => (store.add(format!("{name}.w"), ParamRole::Weight, glorot(d_out, d_in, rng)), None, None),
            GConvKind::Semantic => {
                let ws = store.add(format!("{name}.w_self"), ParamRole::Weight, glorot(d_out, d_in, rng));
                let wn = store.add(format!("{name}.w_neigh"), ParamRole::Weight, glorot(d_out, d_in, rng));
                let t = store.add(format!("{name}.t"), ParamRole::Attention, Tensor::zeros([graph.support_len()]));
                (ws, Some(wn), Some(t))
            }
        };
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros([d_out])));
        Self { kind, d_in, d_out, n: graph.n(), w_self, w_neigh, t, bias }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var, graph: &ScaleGraph<S>) -> Result<Var> {
        if graph.n() != self.n {
            return Err(Error::ShapeMismatch { op: "gconv", lhs: vec![self.n], rhs: vec![graph.n()] });
        }
        check_nodes(ctx.tape, x, self.n, self.d_in, "gconv")?;
        let out = match (self.kind, self.w_neigh, self.t) {
            (GConvKind::Vanilla, None, None) => {
                let h = ctx.linear(x, self.w_self)?;
                let a = ctx.constant(graph.a_tilde().clone());
                ctx.tape.matmul(a, h)?
            }
            (GConvKind::Semantic, Some(w_neigh), Some(t)) => {
                let m = self.aggregation(ctx, t, graph)?;
                let eye = ctx.constant(graph.eye.clone());
                let m_self = ctx.tape.hadamard(m, eye)?;
                let m_neigh = ctx.tape.sub(m, m_self)?;
                let hs = ctx.linear(x, self.w_self)?;
                let hn = ctx.linear(x, w_neigh)?;
                let ys = ctx.tape.matmul(m_self, hs)?;
                let yn = ctx.tape.matmul(m_neigh, hn)?;
                ctx.tape.add(ys, yn)?
            }
            _ => {
                return Err(Error::KindMismatch {
                    expected: self.kind.as_str().into(),
                    found: "inconsistent parameters".into(),
                })
            }
        };
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_bias(out, b)
            }
            None => Ok(out),
        }
    }

    /// Row-normalized support weights `softmax(T)` as an `N × N` matrix.
    pub fn aggregation<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, t: ParamId, graph: &ScaleGraph<S>) -> Result<Var> {
        let tv = ctx.p(t);
        let dense = ctx.tape.scatter(tv, graph.support().clone(), &[graph.n(), graph.n()])?;
        ctx.tape.masked_softmax(dense, graph.mask().clone())
    }
}
