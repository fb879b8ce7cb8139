//! Layer-preference KV-cache management.
//!
//! The crate turns recent-window attention statistics into per-layer cache
//! budgets, evicts cached token slots with a mean/variance indicator, and
//! runs a stage-by-stage prefill schedule whose final keep-sets match a
//! single eviction with the final budgets. A slot-level memory ledger and a
//! decode-phase simulator sit on top.
//!
//! Numeric code is generic over [`Real`] (`f32`/`f64`). Budget apportionment
//! is done in exact rational arithmetic so that rounding is deterministic.
//! The aliases below fix the scalar to `f64`, which is what the CLI and the
//! reports use.

pub mod alloc;
pub mod cli;
pub mod engine;
pub mod error;
pub mod eviction;
pub mod matrix;
pub mod report;
pub mod scalar;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
pub use scalar::Real;

/// Exact rational used for apportionment and the monotone-decrease check.
pub type Exact = num_rational::BigRational;

pub type Window64 = stats::WindowAttention<f64>;
pub type Window32 = stats::WindowAttention<f32>;
pub type Stats64 = stats::LayerStats<f64>;
pub type Params64 = stats::PreferenceParams<f64>;
pub type Indicator64 = eviction::Indicator<f64>;
pub type Score64 = eviction::Score<f64>;
pub type Cache64 = eviction::KvCacheLayer<f64>;
pub type Config64 = engine::EngineConfig<f64>;
pub type Prefill64 = engine::PrefillResult<f64>;
