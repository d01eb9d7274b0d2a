//! Deterministic federated-learning simulator.
//!
//! The crate wires together non-IID partitioning, FedAvg with partial
//! participation, LoRA adapter federation with clipped and 4-bit quantized
//! payloads, parameter-decoupled personalization, classification metrics with
//! hierarchical class grouping, and energy / CO2e accounting.
//!
//! Model, adapter and aggregation code is generic over the scalar type
//! (`f32` or `f64`, see [`Scalar`]); the aliases below fix it to `f64`, which
//! is what the experiment runner uses.

pub mod adapters;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod greenledger;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod personalization;
pub mod rng;
pub mod scalar;

pub use error::{FedError, Result};
pub use scalar::Scalar;

/// Parameter vector in double precision.
pub type Params = model::ParamVector<f64>;
/// Single-precision parameter vector.
pub type ParamsF32 = model::ParamVector<f32>;
/// Labeled dataset in double precision.
pub type Dataset = dataset::LabeledDataset<f64>;
/// Labeled example in double precision.
pub type Example = dataset::LabeledExample<f64>;
/// LoRA adapter in double precision.
pub type Adapter = adapters::LoraAdapter<f64>;
/// 4-bit (or wider) quantized tensor with a double-precision scale.
pub type Quantized = adapters::QuantizedTensor<f64>;
