//! Federated fine-tuning of classification heads and LoRA adapters on top of
//! a frozen 3D transformer encoder.

pub mod aggregation;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod heads;
pub mod kernels;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
pub use params::{Param, ParamSet};
pub use tensor::{DType, Tensor};
