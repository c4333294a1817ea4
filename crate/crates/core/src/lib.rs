//! Embodiment-aware transformer policy heads at desk scale.
//!
//! Robot morphology enters the policy through three mechanisms:
//!
//! * kinematic tokens: per-joint temporal chunks of the action trajectory,
//!   embedded and appended to the token sequence ([`tokenization`]);
//! * topology-aware attention: hard, mixed or soft biases on the
//!   joint-to-joint attention block ([`topo_attention`]);
//! * joint-attribute conditioning: FiLM modulation of kinematic-token
//!   embeddings from per-joint descriptors ([`conditioning`]).
//!
//! [`policy`] assembles them into a small flow-matching transformer with exact
//! gradients, [`training`] provides a synthetic multi-embodiment benchmark and
//! training loop, and [`evaluation`] the success-rate statistics.

pub mod autodiff;
pub mod conditioning;
pub mod error;
pub mod evaluation;
pub mod morphology;
pub mod nn;
pub mod policy;
pub mod tokenization;
pub mod topo_attention;
pub mod training;

pub use error::{Error, Result};
