//! Everything around the model: dataset files, training, evaluation,
//! checkpoints and images.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod optim;
pub mod train;
pub mod viz;
