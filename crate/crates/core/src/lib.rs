//! Hierarchical residual networks (HiResNets) on a small, deterministic
//! reverse-mode autodiff engine.
//!
//! A HiResNet adds long-range projections between stage outputs of a
//! convolutional network: the output of stage `ℓ` becomes
//! `relu(F(x) + Σ_j P(x_j))` over every enabled earlier level `j`, where
//! each projection `P` is average pooling, a 1×1 convolution and batch
//! normalization. The crate covers the tensor engine, model construction
//! and parameter accounting, training, CIFAR-10 ingestion and the
//! activation / ablation analyses.

pub mod analysis;
pub mod architecture;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;
pub mod training;

pub use architecture::{
    Baseline, ForwardTrace, Model, ModelConfig, ProjectionSpec, StageConfig, VariantMask,
};
pub use data::{Dataset, SplitSpec, SyntheticSpec};
pub use error::{Error, Result};
pub use kernels::{BatchNormState, BnMode, ConvParams, Mode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use training::{MetricsRecord, TrainConfig, TrainOutcome};
