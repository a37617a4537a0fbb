pub mod autograd;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod raster;
pub mod scene;
pub mod scene_io;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
