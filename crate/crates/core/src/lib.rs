//! Token-level, information-aware advantage shaping for group-relative policy
//! optimization, run end to end on a tiny decoder-only transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`vocab`]: the closed token alphabet, synthetic modular-arithmetic tasks and
//!   the answer checker.
//! * [`model`]: the causal transformer policy with an explicit KV cache.
//! * [`grad`]: hand-written backward pass, gradient clipping and AdamW.
//! * [`rollout`]: group sampling from a frozen snapshot and importance ratios.
//! * [`mi`]: early-exit conditional mutual-information profiling (naive, cache
//!   preloading, chunked).
//! * [`advantage`]: group-normalized, informativeness and exploration advantages.
//! * [`trainer`]: clipped surrogate objective with KL to a reference policy.
//! * [`eval`]: Pass@k, Length@k and Ratio@k.
//! * [`theory`]: exact-enumeration checks of the first-order length and entropy laws.
//! * [`bench`] and [`cli`]: estimator micro-benchmark and command-line entry point.

pub mod advantage;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod grad;
pub mod linalg;
pub mod mi;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod theory;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{KvCache, Logits, ModelConfig, Params};
pub use vocab::{TokenId, Vocab};
