use super::{EngineConfig, MemoryLedger, PrefillResult, Strategy};
use crate::alloc::{
    allocate_final, allocate_stage, uniform_allocate, BudgetSchedule, BudgetVector, LayerBounds,
};
use crate::error::{Error, Result};
use crate::eviction::{evict, layer_indicator, Indicator, KvCacheLayer};
use crate::scalar::Real;
use crate::stats::LayerStats;
use crate::trace::AttentionTrace;

struct Layout {
    layers: usize,
    heads: usize,
    seq_len: usize,
    window: usize,
    bounds: LayerBounds,
}

fn layout<T: Real>(trace: &AttentionTrace, cfg: &EngineConfig<T>) -> Result<Layout> {
    let (layers, window, seq_len) = (trace.num_layers(), trace.window(), trace.seq_len());
    if window >= seq_len {
        return Err(Error::Shape(format!(
            "window {window} leaves no older tokens in a sequence of {seq_len}"
        )));
    }
    let min_budget = window + 1;
    if cfg.total_budget < layers * min_budget {
        return Err(Error::BudgetTooSmall {
            total: cfg.total_budget,
            layers,
            min_budget,
        });
    }
    Ok(Layout {
        layers,
        heads: trace.num_heads(),
        seq_len,
        window,
        bounds: LayerBounds::uniform(layers, min_budget, seq_len),
    })
}

fn analyze_layer<T: Real>(
    trace: &AttentionTrace,
    layer: usize,
    cfg: &EngineConfig<T>,
) -> Result<(LayerStats<T>, Indicator<T>)> {
    let windows = trace.layer_windows::<T>(layer)?;
    let stats = LayerStats::from_heads(&windows, &cfg.params, cfg.head_aggregation)?;
    let indicator = layer_indicator(&windows, cfg.gamma, cfg.pool)?;
    Ok((stats, indicator))
}

fn evict_all<T: Real>(
    caches: Vec<KvCacheLayer<T>>,
    budgets: &[usize],
) -> Result<Vec<KvCacheLayer<T>>> {
    caches
        .into_iter()
        .zip(budgets)
        .map(|(c, &b)| evict(c, b))
        .collect()
}

fn retained<T: Real>(caches: &[KvCacheLayer<T>]) -> usize {
    caches.iter().map(KvCacheLayer::len).sum()
}

/// Stage-by-stage prefill. After layer `m` is prefilled its preference and
/// indicator join the running sets, budgets for layers `0..=m` are
/// recomputed, and every processed layer is evicted to its new budget.
pub fn prefill_cascade<T: Real>(
    trace: &AttentionTrace,
    cfg: &EngineConfig<T>,
) -> Result<PrefillResult<T>> {
    let lay = layout(trace, cfg)?;
    let mut ledger = MemoryLedger::new(lay.heads, lay.seq_len, lay.layers, cfg.total_budget);
    let mut caches: Vec<KvCacheLayer<T>> = Vec::with_capacity(lay.layers);
    let mut stats = Vec::with_capacity(lay.layers);
    let mut prefs = Vec::with_capacity(lay.layers);
    let mut schedule = BudgetSchedule::default();

    for m in 0..lay.layers {
        let (layer_stats, indicator) = analyze_layer(trace, m, cfg)?;
        prefs.push(layer_stats.preference);
        stats.push(layer_stats);
        caches.push(KvCacheLayer::synthetic(m, cfg.payload_dim, indicator)?);
        let held = retained(&caches);

        let prev = schedule.final_allocation();
        let budgets = match cfg.strategy {
            Strategy::Cake => allocate_stage(&prefs, cfg.total_budget, prev, &lay.bounds)?,
            Strategy::Uniform => uniform_stage(m + 1, cfg.total_budget, prev)?,
        };
        // layers are independent here; order does not matter
        caches = evict_all(caches, &budgets.budgets)?;
        ledger.record(held, retained(&caches));
        schedule.stages.push(budgets);
    }

    let final_budgets = schedule
        .final_allocation()
        .cloned()
        .ok_or(Error::Empty("trace layers"))?;
    Ok(PrefillResult {
        caches,
        final_budgets,
        schedule,
        stats,
        ledger,
        seq_len: lay.seq_len,
        window: lay.window,
    })
}

fn uniform_stage(layers: usize, total: usize, prev: Option<&BudgetVector>) -> Result<BudgetVector> {
    let mut b = uniform_allocate(layers, total)?;
    if let Some(prev) = prev {
        for (cur, &before) in b.budgets.iter_mut().zip(&prev.budgets) {
            *cur = (*cur).min(before);
        }
    }
    Ok(b)
}

/// All preferences first, one allocation, one eviction per full layer.
/// Every layer is held at full length at once, so the ledger peak is
/// `S * L * heads`.
pub fn prefill_oneshot<T: Real>(
    trace: &AttentionTrace,
    cfg: &EngineConfig<T>,
) -> Result<PrefillResult<T>> {
    let lay = layout(trace, cfg)?;
    let mut ledger = MemoryLedger::new(lay.heads, lay.seq_len, lay.layers, cfg.total_budget);
    let mut caches = Vec::with_capacity(lay.layers);
    let mut stats = Vec::with_capacity(lay.layers);
    for m in 0..lay.layers {
        let (layer_stats, indicator) = analyze_layer(trace, m, cfg)?;
        stats.push(layer_stats);
        caches.push(KvCacheLayer::synthetic(m, cfg.payload_dim, indicator)?);
    }
    let held = retained(&caches);
    let prefs: Vec<T> = stats.iter().map(|s| s.preference).collect();
    let final_budgets = match cfg.strategy {
        Strategy::Cake => allocate_final(&prefs, cfg.total_budget, &lay.bounds)?,
        Strategy::Uniform => uniform_allocate(lay.layers, cfg.total_budget)?,
    };
    let caches = evict_all(caches, &final_budgets.budgets)?;
    ledger.record(held, retained(&caches));
    Ok(PrefillResult {
        caches,
        schedule: BudgetSchedule {
            stages: vec![final_budgets.clone()],
        },
        final_budgets,
        stats,
        ledger,
        seq_len: lay.seq_len,
        window: lay.window,
    })
}

/// Whether evicting through `schedule` stage by stage leaves exactly the
/// cache (positions, payload, indicator) that one eviction with the last
/// budget leaves. `schedule` must be non-empty and non-increasing.
pub fn verify_staged_eviction<T: Real>(
    ind: &Indicator<T>,
    schedule: &[usize],
    payload_dim: usize,
) -> Result<bool> {
    let &last = schedule.last().ok_or(Error::Empty("schedule"))?;
    if let Some((stage, pair)) = schedule.windows(2).enumerate().find(|(_, p)| p[1] > p[0]) {
        return Err(Error::IncreasingSchedule {
            stage: stage + 1,
            from: pair[0],
            to: pair[1],
        });
    }
    let window = ind.omega_count();
    if last < window {
        return Err(Error::BudgetBelowWindow {
            budget: last,
            window,
        });
    }
    let full = KvCacheLayer::synthetic(0, payload_dim, ind.clone())?;
    let cascaded = schedule
        .iter()
        .try_fold(full.clone(), |cache, &b| evict(cache, b))?;
    Ok(cascaded == evict(full, last)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eviction::Score;
    use crate::matrix::Matrix;
    use crate::trace::TraceHeader;

    /// Every layer gets the same rows, so preferences are equal.
    fn repeated_trace(layers: usize, seq_len: usize, window: usize) -> AttentionTrace {
        let mut rows = Vec::new();
        for i in 0..window {
            let q = seq_len - window + i;
            let mut row = vec![0.0f32; seq_len];
            // alternate two shapes so the columns vary across rows
            for (k, x) in row.iter_mut().enumerate().take(q + 1) {
                *x = if (k + i) % 2 == 0 { 2.0 } else { 1.0 };
            }
            let total: f32 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
            rows.push(row);
        }
        let block = Matrix::from_rows(&rows).unwrap();
        let header = TraceHeader::new(layers, 1, seq_len, window, "test").unwrap();
        AttentionTrace::new(header, vec![block; layers]).unwrap()
    }

    #[test]
    fn two_equal_layers_split_then_halve() {
        let trace = repeated_trace(2, 200, 4);
        let r = prefill_cascade::<f64>(&trace, &EngineConfig::new(100)).unwrap();
        assert_eq!(r.schedule.stages[0].budgets, vec![100]);
        assert_eq!(r.schedule.stages[1].budgets, vec![50, 50]);
        assert_eq!(r.caches[0].len(), 50);
        assert_eq!(r.ledger.per_stage_held, vec![200, 300]);
        assert_eq!(r.ledger.per_stage_slots, vec![100, 100]);
        assert_eq!(r.ledger.peak_slots, 300);
    }

    #[test]
    fn single_layer_cascade_equals_oneshot() {
        let trace = repeated_trace(1, 64, 8);
        let cfg = EngineConfig::<f64>::new(20);
        let a = prefill_cascade(&trace, &cfg).unwrap();
        let b = prefill_oneshot(&trace, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.schedule.stages.len(), 1);
        assert_eq!(a.final_budgets.budgets, vec![20]);
    }

    #[test]
    fn equal_preferences_oneshot() {
        let trace = repeated_trace(4, 256, 8);
        let r = prefill_oneshot::<f64>(&trace, &EngineConfig::new(400)).unwrap();
        assert_eq!(r.final_budgets.budgets, vec![100; 4]);
        assert_eq!(r.ledger.peak_slots, 4 * 256);
    }

    #[test]
    fn uniform_strategy() {
        let trace = repeated_trace(4, 256, 8);
        let mut cfg = EngineConfig::<f64>::new(400);
        cfg.strategy = Strategy::Uniform;
        let r = prefill_cascade(&trace, &cfg).unwrap();
        assert_eq!(r.final_budgets.budgets, vec![100; 4]);
        assert!(r.schedule.is_monotone());
    }

    #[test]
    fn budget_below_floor_is_rejected() {
        let trace = repeated_trace(2, 64, 8);
        let err = prefill_cascade::<f64>(&trace, &EngineConfig::new(17)).unwrap_err();
        assert!(matches!(err, Error::BudgetTooSmall { min_budget: 9, .. }));
    }

    #[test]
    fn staged_eviction_examples() {
        let ind = Indicator::from_scores(vec![
            Score::Finite(0.5),
            Score::Finite(0.9),
            Score::Finite(0.1),
            Score::Omega,
            Score::Omega,
        ])
        .unwrap();
        assert!(verify_staged_eviction(&ind, &[5], 2).unwrap());
        assert!(verify_staged_eviction(&ind, &[4, 3], 2).unwrap());
        assert!(matches!(
            verify_staged_eviction(&ind, &[3, 4], 2),
            Err(Error::IncreasingSchedule {
                stage: 1,
                from: 3,
                to: 4
            })
        ));
        assert!(verify_staged_eviction(&ind, &[], 2).is_err());
        assert!(verify_staged_eviction(&ind, &[4, 1], 2).is_err());
    }
}
