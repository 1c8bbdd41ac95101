//! Reference attention with per-token gating of the reference branch.
//!
//! The building blocks, bottom-up:
//!
//! - [`tensor`]: dense row-major matrices, MAC-counted products, softmax and sigmoid.
//! - [`attention`]: vanilla reference attention plus the global and
//!   explicit-similarity gating baselines.
//! - [`aicg`]: implicit correlation gating through learnable summary tokens.
//! - [`block`]: one entry point dispatching over every gating mode.
//! - [`autodiff`]: hand-written backward pass checked against finite differences.
//! - [`cost`]: closed-form MAC counts and their reconciliation with the live counter.
//! - [`bench`]: median/MAD wall-clock harness over gating modes.
//!
//! Kernels are generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! verification paths use.

pub mod aicg;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod block;
pub mod config;
pub mod cost;
pub mod error;
pub mod scalar;
pub mod tensor;

pub use config::{AggregationMode, AttnConfig, GatePlacement, GatingMode};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{MacCounter, Rng};

pub type Matrix = tensor::Matrix<f64>;
pub type RAWeights = attention::RAWeights<f64>;
pub type AttnTrace = attention::AttnTrace<f64>;
pub type GateMap = aicg::GateMap<f64>;
pub type Forward = block::Forward<f64>;

pub type Matrix32 = tensor::Matrix<f32>;
pub type RAWeights32 = attention::RAWeights<f32>;
