use rand_chacha::ChaCha8Rng;

use super::{BatchNorm, Ctx, GConv, GConvKind, NonLocal, ParamStore, ScaleGraph};
use crate::autodiff::Var;
use crate::error::Result;
use crate::scalar::Scalar;

/// `h = relu(bn1(conv1 x)); h = relu(bn2(conv2 h)); out = non_local(x + h)`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: GConv,
    pub bn1: BatchNorm,
    pub conv2: GConv,
    pub bn2: BatchNorm,
    pub non_local: NonLocal,
}

impl ResidualBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: GConvKind,
        width: usize,
        graph: &ScaleGraph<S>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = GConv::new(store, &format!("{name}.conv1"), kind, width, width, graph, false, rng);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), width);
        let conv2 = GConv::new(store, &format!("{name}.conv2"), kind, width, width, graph, false, rng);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), width);
        let non_local = NonLocal::new(store, &format!("{name}.non_local"), width, rng);
        Self { conv1, bn1, conv2, bn2, non_local }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var, graph: &ScaleGraph<S>) -> Result<Var> {
        let h = self.conv1.forward(ctx, x, graph)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h, graph)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let s = ctx.tape.add(x, h)?;
        self.non_local.forward(ctx, s)
    }
}
