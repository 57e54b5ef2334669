//! Simulation and analysis kernel for stochastic backoff processes: send
//! sequences, the block construction, the backoff and jammed processes with
//! their couplings, the unsticking processes with time reversal, and the
//! statistics used to check them.

pub mod analysis;
pub mod backoff;
pub mod blocks;
pub mod engine;
pub mod jammed;
pub mod sequences;
pub mod unsticking;

pub use blocks::{BlockConfig, BlockError, BlockOverrides, BlockTable};
pub use engine::{RngStream, StreamProvenance, STREAM_DERIVATION_VERSION};
pub use sequences::{SendSequence, SequenceError, SequenceRule, Splices, TailRule};
