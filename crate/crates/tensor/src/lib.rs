//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! The tape is rebuilt per forward pass; parameters live in a
//! [`ParamStore`] that the tape borrows immutably, gradients come back as
//! [`ParamGrads`], and [`AdamState`] applies updates. Checkpoints use a small
//! self-describing binary format (see [`checkpoint`]).

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use layers::{BatchNorm, Linear, Mlp, ParamBuilder};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use sparse::CsrMatrix;
pub use tape::{BatchNormUpdate, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
