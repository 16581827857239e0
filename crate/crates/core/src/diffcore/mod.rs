//! Dense tensors with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use nn::{bigru, gru_cell, BiGruLayer, BiStates, GruCell, Linear, Mlp2};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Conv2dSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
