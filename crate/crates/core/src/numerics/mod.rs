//! Dense tensors and a reverse-mode gradient tape.
//!
//! Tensors are plain row-major value arrays. Differentiable computation is
//! recorded on a [`Tape`]: parameters enter as [`Tape::leaf`]s, inputs that
//! must not receive gradient enter as [`Tape::constant`]s, and
//! [`Tape::backward`] returns a gradient for every trainable leaf reachable
//! from the loss.
//!
//! Conventions fixed here so results are reproducible across implementations:
//!
//! * GELU is the tanh form `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
//! * Layer normalisation uses a variance floor of `1e-5`.
//! * Softmax normalisers are summed smallest-term-first, so a row's result
//!   depends only on the multiset of its entries, not their order.
//! * `top_k` breaks ties toward the lower index and is a constant in the
//!   backward pass; only the selected values carry gradient.

mod real;
mod tape;
mod tensor;

pub use real::{Precision, Real};
pub use tape::{
    gelu_scalar, softmax_rows, top_k_indices, Gradients, Tape, Var, GELU_CUBIC, GELU_SCALE,
    LAYER_NORM_EPS,
};
pub use tensor::{matmul_raw, Tensor};
