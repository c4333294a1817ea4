//! Flow-matching transformer action policy.
//!
//! One sequence per sample: an observation token, `H` noisy-action tokens
//! carrying the flow time, then the kinematic tokens built from the same
//! noisy actions. Attention on the kinematic block follows the configured
//! mask mode; the velocity is read from the action tokens.

pub mod checkpoint;
mod config;
mod model;
mod params;

pub use config::{MaskMode, PolicyConfig};
pub use model::{
    flow_state, initial_topology_table, integrate, param_layout, time_features, Embodiment, FlowBatch, FlowNoise,
    FlowState, ForwardOutput, LossOutput, ParamSpec, PolicyModel, ADJ_TABLE, SPD_TABLE,
};
pub use params::{FinetuneMode, Param, ParamStore, Partition};
