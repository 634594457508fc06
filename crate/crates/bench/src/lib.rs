//! Shared fixtures for the benchmarks.

pub use rftrace;

use rftrace::{Shape, Tensor};

/// Deterministic pseudo-random values in [-1, 1) without an RNG dependency.
pub fn input(shape: Shape) -> Tensor {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    Tensor::from_fn(shape, |_, _, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

pub fn weights(len: usize) -> Vec<f32> {
    input(Shape::new(1, 1, len)).into_data().into_iter().map(|v| v * 0.1).collect()
}
