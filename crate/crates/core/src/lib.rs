#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod error;
mod linalg;
pub mod params;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore, Sgd};
pub use tensor::Tensor;
pub mod data;
pub mod rng;
pub mod model;
pub mod task_agnostic;
pub mod merge;
pub mod task_specific;
pub mod pruning;
pub mod analysis;
pub mod learner;
