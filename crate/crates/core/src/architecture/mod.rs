//! Baselines, hierarchical projections and parameter accounting.

mod accounting;
mod config;
mod model;

pub use accounting::{
    adjust_widths, count_config_params, count_params, projection_param_delta, weighted_layer_count,
    ParamCount,
};
pub use config::{
    enumerate_projections, Baseline, ModelConfig, ProjectionSpec, StageConfig, VariantMask,
};
pub use model::{layout, projection_forward, ForwardTrace, Init, Model, ParamSpec, TapeTrace};
