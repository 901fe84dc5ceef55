//! Keyword-spotting model training and evaluation primitives.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! a small dense-tensor engine with reverse-mode differentiation, the
//! LFBE audio frontend, the sliding-window CNN detector, the max-pooling
//! loss family with latency control, Adam, a feature-space corpus
//! synthesizer, and streaming detection / DET-curve metrics. File
//! formats, parallel training orchestration, and the CLI live in the
//! companion `kwslab` crate.
//!
//! The crate is `no_std` (with `alloc`); float math routes through
//! `num_traits::Float` backed by libm, so results are identical across
//! hosts.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dsp;
pub mod error;
pub mod eval;
pub mod graph;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
