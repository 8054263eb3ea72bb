//! Dense `f64` tensors, a reverse-mode tape, and the layers built on them.

pub mod gradcheck;
pub mod layers;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Conv2d, GroupNorm, Mhsa};
pub use nn::PairCounter;
pub use ops::concat;
pub use params::{ParamId, ParamSnapshot, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
