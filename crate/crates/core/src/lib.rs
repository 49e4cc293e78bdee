//! microedit-core: a desk-scale knowledge-editing laboratory.
//!
//! The crate builds up in layers:
//!
//! - [`tensor`], [`linalg`], [`tape`], [`rng`] — dense f64 numerics and
//!   reverse-mode differentiation;
//! - [`factworld`] — synthetic closed-world facts, training corpora and
//!   edit benchmarks;
//! - [`microlm`] — the editable decoder-only transformer with named,
//!   addressable weights, hooks and causal tracing;
//! - [`editors`] — seven editing methods behind one `apply_to_model`
//!   contract with enforced capability flags;
//! - [`trainer`] — base-model pretraining and scope-classifier training;
//! - [`evaluate`] — the six edit metrics;
//! - [`harness`] — hyperparameters, editing regimes, reports and
//!   reproducible benchmark runs.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod linalg;
pub mod tape;
pub mod factworld;
pub mod microlm;
pub mod editors;
pub mod trainer;
pub mod evaluate;
pub mod harness;

pub use error::{Error, Result};
pub use rng::CounterRng;
pub use tensor::Tensor;
