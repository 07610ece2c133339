//! # headroom
//!
//! Head-wise KV-cache offload modeling: closed-form memory accounting and
//! capacity solving, roofline analysis with phase-time estimates, a
//! chunk/head-group planner, and a desk-scale two-tier attention runtime
//! with double-buffered asynchronous transfers and a simulated-time ledger.

pub mod engine;
pub mod error;
pub mod memory;
pub mod planner;
pub mod roofline;
pub mod runtime;
pub mod workload;

pub use error::{Error, Result};
pub use workload::{HardwareSpec, ModelSpec, PolicyKind, GIB};
