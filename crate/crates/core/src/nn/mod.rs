//! Dense arrays, reverse-mode differentiation, AdamW and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{AttnLayout, Tape, Var};
pub use tensor::Tensor;
