//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod tape;

pub use gradcheck::{gradient_check, relative_error, Coords, GradCheckReport};
pub use tape::{BatchStats, Gradients, Primitive, Tape, Var};

#[cfg(test)]
mod tests;
