//! Array substrate and the differentiable primitives the pipeline composes.

pub mod adam;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod rng;
pub mod tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use ops::{
    bilinear_resize, conv1x1_backward, conv1x1_forward, euclidean, pairwise_dist, relu,
    relu_backward, squared_euclidean, Conv1x1Grads,
};
pub use rng::SeedStream;
pub use tensor::{pairwise_sum, Real, Tensor};

/// Glorot uniform weights for a `fan_in × fan_out` matrix.
pub fn xavier_uniform<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.random_range(-a..a)))
}

/// Glorot normal values for a tensor with the given fans.
pub fn xavier_normal<T: Real>(
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(dims, |_| T::lit(normal.sample(rng)))
}

/// Hex SHA-256 over dims and raw `f32` bits; used for regression pins.
pub fn fingerprint(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for &d in t.dims() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}
