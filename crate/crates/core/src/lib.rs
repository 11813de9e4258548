//! Recursive multi-model fusion for salient object detection.

pub mod autograd;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod sdf;
pub mod tensor;
