//! Dual-stream lesion segmentation: a shared-encoder U-Net whose decoder
//! output is fused with a super-resolution side task through dilated-context
//! attention, trained with a class-balanced cross-entropy, pixel
//! reconstruction, and region-statistics objective.
//!
//! Everything runs on the CPU over plain `Vec` storage. The only external
//! dependency is `num-traits`, which lets the whole stack be generic over
//! the float type; the aliases at the crate root fix `f64` as the default.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::BnMode;
pub use losses::{LossConfig, LossParts};
pub use metrics::MetricsReport;
pub use model::{Model, ModelConfig, ParamKind, ParamStore, Variant};
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use synth::{Sample, SynthParams};
pub use trainer::TrainConfig;

/// Default-precision tensor.
pub type Tensor = tensor::TensorND<f64>;
/// Default-precision tape.
pub type Graph = graph::Graph<f64>;
