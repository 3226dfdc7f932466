//! Adaptive token-halting vision transformer engine.
//!
//! The crate is organized around a small tape-based autodiff core
//! ([`tensor`]) on top of which sit the transformer blocks ([`model`]), the
//! per-token halting state machine ([`controller`]), top-k sparse attention
//! ([`stabilizer`]), the training objectives ([`losses`]), a training
//! harness ([`train`]), and FLOPs/trace accounting ([`metrics`]).

pub mod controller;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod stabilizer;
pub mod tensor;
pub mod train;
