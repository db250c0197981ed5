//! KV-cache compression for a small decoder-only transformer: prompt-conditioned
//! soft tokens composed from a trainable basis probe the prompt, the cache is
//! cut to a budget by the probe scores, and evicted values are routed into the
//! survivors through a load-balanced attention flow.
//!
//! Module map:
//! - [`numerics`]: matrices, softmax, the project RNG
//! - [`backbone`]: frozen transformer, KV cache, prefill and decode
//! - [`metalib`]: basis library, selector and soft-token synthesis
//! - [`probe`]: soft-token importance scores and budgeted partitioning
//! - [`consolidate`]: attention-flow aggregation of evicted values
//! - [`train`]: gold attention, loss, gradients, two-stage training
//! - [`baselines`]: comparator eviction policies
//! - [`harness`]: corpora, benchmark, ablation, config, checkpoints, CLI

pub mod backbone;
pub mod baselines;
pub mod consolidate;
pub mod error;
pub mod harness;
pub mod metalib;
pub mod numerics;
pub mod optim;
pub mod probe;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
