use rand_chacha::ChaCha8Rng;

use super::{glorot, Ctx, ParamId, ParamRole, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Embedded-Gaussian non-local block with a residual connection:
/// `x + softmax(θx·(φx)ᵀ/√D_e)·(g x)·W_zᵀ`.
#[derive(Clone, Debug)]
pub struct NonLocal {
    pub channels: usize,
    pub embed: usize,
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub w_z: ParamId,
}

impl NonLocal {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let embed = (channels / 2).max(1);
        let theta = store.add(format!("{name}.theta"), ParamRole::Weight, glorot(embed, channels, rng));
        let phi = store.add(format!("{name}.phi"), ParamRole::Weight, glorot(embed, channels, rng));
        let g = store.add(format!("{name}.g"), ParamRole::Weight, glorot(embed, channels, rng));
        // Small output projection: the block starts close to the identity but
        // theta, phi and g still receive gradient.
        let w_z = glorot::<S>(channels, embed, rng).map(|v| v * S::of(0.1));
        let w_z = store.add(format!("{name}.w_z"), ParamRole::Weight, w_z);
        Self { channels, embed, theta, phi, g, w_z }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let attention = self.attention(ctx, x)?;
        let gx = ctx.linear(x, self.g)?;
        let y = ctx.tape.matmul(attention, gx)?;
        let z = ctx.linear(y, self.w_z)?;
        ctx.tape.add(x, z)
    }

    /// Row-stochastic `batch × N × N` attention.
    pub fn attention<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let s = ctx.tape.value(x).shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::ShapeMismatch { op: "non_local", lhs: s.to_vec(), rhs: vec![self.channels] });
        }
        let th = ctx.linear(x, self.theta)?;
        let ph = ctx.linear(x, self.phi)?;
        let pht = ctx.tape.transpose(ph)?;
        let scores = ctx.tape.matmul(th, pht)?;
        let scores = ctx.tape.scale(scores, S::of(1.0 / (self.embed as f64).sqrt()))?;
        ctx.tape.softmax_last(scores)
    }
}
