#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod correlation;
pub mod data;
pub mod decode;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod search;
pub mod stats;
pub mod supernet;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
