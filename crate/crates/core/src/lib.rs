//! Composition of state space model states over a database of precomputed
//! context states.
//!
//! The crate is organized by role:
//!
//! - [`ssm`]: a small stacked input-varying diagonal SSM language model used
//!   for every end-to-end check, and extraction of per-context states.
//! - [`compose`]: order-dependent and permutation-invariant composition of
//!   stored states, plus the elementary symmetric polynomial kernels behind
//!   them.
//! - [`store`]: the on-disk database of states with a hashing retriever.
//! - [`train`]: fine-tuning objectives through and up to the composition,
//!   with hand-written reverse-mode gradients for single-layer models.
//! - [`attribution`]: leave-one-in and leave-one-out context attribution.
//! - [`corpus`], [`eval`], [`bench`]: the synthetic fact-recall corpus,
//!   evaluation harness and scaling benchmarks behind the CLI.

pub mod attribution;
pub mod bench;
pub mod compose;
pub mod corpus;
pub mod eval;
pub mod error;
pub mod ssm;
pub mod store;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
