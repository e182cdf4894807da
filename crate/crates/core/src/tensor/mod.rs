//! Dense f64 tensors with reverse-mode automatic differentiation.

mod conv;
mod tape;
mod value;

pub use conv::{conv_out_extent, conv_transpose_out_extent};
pub use tape::{sigmoid, softplus, BinaryKind, Gradients, Tape, TensorId, UnaryKind};
pub use value::{broadcast_shape, broadcast_strides, reduce_to_shape, strides_for, TensorValue};

#[cfg(test)]
mod tests;
