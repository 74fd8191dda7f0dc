pub mod csc;
pub mod density;
pub mod error;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{KernelBank, Tensor};
