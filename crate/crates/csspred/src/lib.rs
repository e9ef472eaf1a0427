//! Functional model of a cross-stage sparse attention pipeline.
//!
//! The crate predicts which query/key pairs matter *before* the exact
//! attention pass runs, then executes attention only on the survivors:
//!
//! 1. [`locodec`] encodes weights offline as sign + leading-one position;
//!    the asymmetric shift-multiply turns projection and scoring into
//!    shift/add arithmetic.
//! 2. [`css`] speculates approximate Q/K, scores them in multiple rounds
//!    of bit-sliced refinement, and thresholds each round by the dynamic
//!    max/min rule to produce a sparsity mask.
//! 3. [`sparsexec`] generates K/V on demand for surviving tokens and runs
//!    exact attention restricted to the mask.
//! 4. [`costmodel`] tallies every arithmetic and memory event so the
//!    approximate pipeline can be compared against [`baselines`].
//! 5. [`tune`] searches the per-round threshold schedule under an output
//!    error budget with successive halving.
//!
//! Everything on the integer side is bit-exact and deterministic for a
//! fixed seed; [`harness`] wires the pieces into reproducible workloads.

pub mod baselines;
pub mod costmodel;
pub mod css;
pub mod error;
pub mod harness;
pub mod io;
pub mod locodec;
pub mod qtensor;
pub mod rng;
pub mod sparsexec;
pub mod tune;

pub use error::{Error, Result};
