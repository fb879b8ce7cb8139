//! Straight-line reference implementations used as test oracles. They share
//! no code with the library beyond the trace types.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

/// Mean + gamma * population variance of each of the first `cols` columns,
/// computed with plain loops, then max- or avg-pooled with truncated edges.
pub fn indicator_scores(
    rows: &[Vec<f64>],
    cols: usize,
    gamma: f64,
    kernel: usize,
    max_pool: bool,
) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut raw = vec![0.0; cols];
    for (c, slot) in raw.iter_mut().enumerate() {
        let mut total = 0.0;
        for r in rows {
            total += r[c];
        }
        let mean = total / n;
        let mut sq = 0.0;
        for r in rows {
            sq += (r[c] - mean) * (r[c] - mean);
        }
        *slot = mean + gamma * (sq / n);
    }
    let half = kernel / 2;
    let mut pooled = vec![0.0; cols];
    for i in 0..cols {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(cols.saturating_sub(1));
        let mut best = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for x in &raw[lo..=hi] {
            best = best.max(*x);
            acc += x;
        }
        pooled[i] = if max_pool {
            best
        } else {
            acc / (hi - lo + 1) as f64
        };
    }
    pooled
}

/// Ranks `None` (protected) above every score, then higher score, then
/// higher index; keeps `budget` and returns them ascending.
pub fn keep_set(scores: &[Option<f64>], budget: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let key = |i: usize| match scores[i] {
            None => (1u8, f64::INFINITY),
            Some(x) => (0u8, x),
        };
        let (ka, kb) = (key(a), key(b));
        kb.0.cmp(&ka.0)
            .then(kb.1.partial_cmp(&ka.1).unwrap())
            .then(b.cmp(&a))
    });
    idx.truncate(budget);
    idx.sort();
    idx
}

/// Decode re-simulation with uniform attention rows, one layer at a time.
/// Window rows are stored as position -> weight maps, so slot bookkeeping
/// differs from the library's aligned vectors.
pub fn decode_uniform(
    start_positions: &[usize],
    seq_len: usize,
    window: usize,
    budget: usize,
    steps: usize,
    gamma: f64,
    kernel: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut positions = start_positions.to_vec();
    let mut rows: Vec<BTreeMap<usize, f64>> = Vec::new();
    let mut sizes = Vec::new();
    for t in 0..steps {
        positions.push(seq_len + t);
        let w = 1.0 / positions.len() as f64;
        rows.push(positions.iter().map(|&p| (p, w)).collect());
        if rows.len() > window {
            rows.remove(0);
        }
        if positions.len() > budget {
            let protected = window.min(positions.len());
            let older = positions.len() - protected;
            let dense: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    positions
                        .iter()
                        .map(|p| r.get(p).copied().unwrap_or(0.0))
                        .collect()
                })
                .collect();
            let scores = indicator_scores(&dense, older, gamma, kernel, true);
            let mut tagged: Vec<Option<f64>> = scores.into_iter().map(Some).collect();
            tagged.extend(std::iter::repeat_n(None, protected));
            let keep = keep_set(&tagged, budget);
            positions = keep.iter().map(|&i| positions[i]).collect();
        }
        sizes.push(positions.len());
    }
    (positions, sizes)
}
