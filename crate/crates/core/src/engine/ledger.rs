use serde::Serialize;

use super::PrefillResult;
use crate::scalar::Real;

/// Slot accounting for one prefill. A slot is one (layer, KV head, token)
/// entry with its key and value counted together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryLedger {
    pub heads: usize,
    pub seq_len: usize,
    pub total_budget: usize,
    /// Slots held before stage `m` manages its caches, including the newly
    /// prefilled layer at full length.
    pub per_stage_held: Vec<usize>,
    /// Slots held after stage `m` has evicted.
    pub per_stage_slots: Vec<usize>,
    pub peak_slots: usize,
    /// Every layer at full length: `S * L * heads`.
    pub naive_peak_slots: usize,
}

impl MemoryLedger {
    pub(crate) fn new(heads: usize, seq_len: usize, layers: usize, total_budget: usize) -> Self {
        Self {
            heads,
            seq_len,
            total_budget,
            per_stage_held: Vec::new(),
            per_stage_slots: Vec::new(),
            peak_slots: 0,
            naive_peak_slots: seq_len * layers * heads,
        }
    }

    pub(crate) fn record(&mut self, held_tokens: usize, retained_tokens: usize) {
        let held = held_tokens * self.heads;
        self.per_stage_held.push(held);
        self.per_stage_slots.push(retained_tokens * self.heads);
        self.peak_slots = self.peak_slots.max(held);
    }

    /// `(B_total + S) * heads`: all earlier layers at budget plus one full layer.
    pub fn cascade_bound(&self) -> usize {
        (self.total_budget + self.seq_len) * self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerReport {
    pub naive_peak_slots: usize,
    pub cascade_peak_slots: usize,
    pub ratio: f64,
    pub bound_slots: usize,
    pub within_bound: bool,
    pub per_stage_slots: Vec<usize>,
    pub per_stage_held: Vec<usize>,
}

pub fn ledger_report<T: Real>(result: &PrefillResult<T>) -> LedgerReport {
    let l = &result.ledger;
    LedgerReport {
        naive_peak_slots: l.naive_peak_slots,
        cascade_peak_slots: l.peak_slots,
        ratio: l.peak_slots as f64 / l.naive_peak_slots as f64,
        bound_slots: l.cascade_bound(),
        within_bound: l.peak_slots <= l.cascade_bound(),
        per_stage_slots: l.per_stage_slots.clone(),
        per_stage_held: l.per_stage_held.clone(),
    }
}
