//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpdnet_core::net::NetConfig;
use xpdnet_core::Tensor;

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// The narrow configuration used for toy-scale training.
pub fn toy_net() -> NetConfig {
    NetConfig {
        backbone_channels: [8, 12, 16],
        mask_channels: 8,
        depth_channels: 8,
        head_channels: 8,
        ..Default::default()
    }
}
