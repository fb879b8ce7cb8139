//! Prefill and decode orchestration over a whole trace.

pub mod campaign;
mod decode;
mod ledger;
mod prefill;

pub use decode::{
    decode_simulate, DecodeAttentionSource, DecodeResult, SourceKind, SyntheticSource,
};
pub use ledger::{ledger_report, LedgerReport, MemoryLedger};
pub use prefill::{prefill_cascade, prefill_oneshot, verify_staged_eviction};

use serde::{Deserialize, Serialize};

use crate::alloc::{BudgetSchedule, BudgetVector};
use crate::eviction::{KvCacheLayer, PoolSpec};
use crate::scalar::Real;
use crate::stats::{HeadAggregation, LayerStats, PreferenceParams};

/// How the global budget is split across layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Proportional to layer preference scores.
    #[default]
    Cake,
    /// Equal split, the baseline.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig<T> {
    /// Global budget in token slots per KV head.
    pub total_budget: usize,
    pub params: PreferenceParams<T>,
    pub pool: PoolSpec,
    pub gamma: T,
    pub head_aggregation: HeadAggregation,
    pub strategy: Strategy,
    /// Width of the synthetic K/V rows carried through eviction.
    pub payload_dim: usize,
}

impl<T: Real> EngineConfig<T> {
    pub const DEFAULT_GAMMA: f64 = 200.0;

    pub fn new(total_budget: usize) -> Self {
        Self {
            total_budget,
            params: PreferenceParams::default(),
            pool: PoolSpec::default(),
            gamma: T::lit(Self::DEFAULT_GAMMA),
            head_aggregation: HeadAggregation::Mean,
            strategy: Strategy::Cake,
            payload_dim: 4,
        }
    }
}

/// Output of a prefill pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefillResult<T> {
    pub caches: Vec<KvCacheLayer<T>>,
    pub final_budgets: BudgetVector,
    pub schedule: BudgetSchedule,
    pub stats: Vec<LayerStats<T>>,
    pub ledger: MemoryLedger,
    pub seq_len: usize,
    pub window: usize,
}

impl<T: Real> PrefillResult<T> {
    /// Retained original positions, one list per layer.
    pub fn keep_sets(&self) -> Vec<Vec<usize>> {
        self.caches.iter().map(|c| c.positions().to_vec()).collect()
    }
}
