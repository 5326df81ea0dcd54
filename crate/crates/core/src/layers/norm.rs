use super::{BufferId, Ctx, Mode, ParamId, ParamRole, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Batch normalization with statistics pooled over batch and nodes.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BufferId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamRole::Gamma, Tensor::ones([channels]));
        let beta = store.add(format!("{name}.beta"), ParamRole::Beta, Tensor::zeros([channels]));
        let running = store.add_buffer(name, channels, S::of(DEFAULT_MOMENTUM));
        Self { channels, gamma, beta, running, eps: DEFAULT_EPS }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let d = ctx.tape.value(x).shape().last().copied();
        if d != Some(self.channels) {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: ctx.tape.value(x).shape().to_vec(),
                rhs: vec![self.channels],
            });
        }
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, S::of(self.eps))?;
                ctx.record_stats(self.running, stats);
                Ok(y)
            }
            Mode::Eval => {
                let rs = ctx.store().buffer(self.running);
                let inv: Vec<S> = rs.var.iter().map(|&v| S::one() / (v + S::of(self.eps)).sqrt()).collect();
                let shift: Vec<S> = rs.mean.iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
                let inv = ctx.constant(Tensor::from_vec(inv));
                let shift = ctx.constant(Tensor::from_vec(shift));
                let xhat = ctx.tape.mul_channel(x, inv)?;
                let xhat = ctx.tape.add_bias(xhat, shift)?;
                let y = ctx.tape.mul_channel(xhat, g)?;
                ctx.tape.add_bias(y, b)
            }
        }
    }
}
