//! Minimal dense tensors with layer-wise reverse-mode differentiation.
//!
//! A [`LayerStack`] forward pass optionally records a [`Tape`] holding each
//! layer's input; [`LayerStack::backward`] walks it in reverse. Summation
//! order is fixed (ascending index), so repeated runs are bit-identical.

mod layer;
mod loss;
mod tensor;

pub use layer::{sgd_step, Layer, LayerParams, LayerSpec, LayerStack, ParamGrads, Tape};
pub use loss::{argmax_rows, count_correct, cross_entropy_loss};
pub use tensor::Tensor;
