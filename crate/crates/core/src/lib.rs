//! Coarse-to-fine adaptive scene attention, desk scale.
//!
//! A small causal transformer reads a 3D scene as a fixed budget of sparse
//! vision tokens pooled from a downsampled point cloud. In its last layers,
//! a parameter-free selector inspects the previous layer's attention map,
//! picks the scene regions the model is focusing on, retrieves fine-grained
//! dense tokens from the full-resolution cloud around those regions, and an
//! adaptive self-attention layer fuses them in as extra keys/values — text
//! tokens see the selected dense detail, sequence length stays constant.
//!
//! The crate also ships a deterministic procedural generator for cross-room
//! benchmark scenes with templated QA, and a harness for training, ablation
//! grids, complexity probes, and attention-map export.
//!
//! All numerics are generic over [`scalar::Scalar`] (f32 or f64); property
//! and acceptance tests run at f64.

pub mod attention;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod pointcloud;
pub mod scalar;
pub mod scenegen;
pub mod selector;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 tensor (test and acceptance precision).
pub type Tensor64 = tensor::Tensor<f64>;
/// f32 tensor (fast training precision).
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 tape.
pub type Tape64 = tape::Tape<f64>;
/// f32 tape.
pub type Tape32 = tape::Tape<f32>;

/// Seeded deterministic generator used throughout the crate.
pub fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit FNV-1a hash, used to derive per-scene random streams.
/// (std's hasher is randomized per process and unusable for reproducibility.)
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
