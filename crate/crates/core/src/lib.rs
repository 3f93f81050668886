//! RapidNet: a CNN engine for the RapidNet mobile backbone family with
//! multi-level dilated convolutions, reparameterizable large-kernel
//! depthwise convolutions and a large-kernel FFN.
//!
//! Tensors are NCHW and generic over `f32`/`f64`. Random streams come from
//! ChaCha8 seeded with a `u64`, so every initialization is reproducible
//! across runs and platforms.

pub mod analysis;
pub mod bench;
pub mod blocks;
pub mod error;
pub mod model;
pub mod ops;
pub mod params;
pub mod reparam;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod weights_io;

pub use error::{Error, Result};
pub use model::{build_model, default_config, model_forward, ModelConfig, RapidNetModel, StageConfig};
pub use ops::NormMode;
pub use params::{NamedTensors, ParamKind, Parameterized};
pub use tensor::{DType, Rng, Scalar, Tensor};
