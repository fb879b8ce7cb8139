use std::collections::VecDeque;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::PrefillResult;
use crate::error::{Error, Result};
use crate::eviction::{synthetic_payload_row, top_k_positions, window_scores, Indicator, PoolSpec};
use crate::matrix::Matrix;
use crate::scalar::Real;

/// Supplies decode-step attention.
pub trait DecodeAttentionSource<T> {
    /// One attention row of the new query over the slots `layer` holds at
    /// decode `step`, the slot appended this step included. `positions` are
    /// the original token indices of those slots.
    fn next_row(&mut self, layer: usize, step: usize, positions: &[usize]) -> Vec<T>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Uniform,
    /// Half the mass on the oldest retained slot, half on the newest few.
    Sink,
    /// Softmax of standard normal logits.
    Noisy,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SourceKind::Uniform),
            "sink" => Ok(SourceKind::Sink),
            "noisy" => Ok(SourceKind::Noisy),
            other => Err(Error::InvalidParam(format!(
                "unknown decode source {other:?}"
            ))),
        }
    }
}

pub struct SyntheticSource {
    kind: SourceKind,
    rng: ChaCha8Rng,
}

impl SyntheticSource {
    const SINK_BAND: usize = 4;

    pub fn new(kind: SourceKind, seed: u64) -> Self {
        Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Real> DecodeAttentionSource<T> for SyntheticSource {
    fn next_row(&mut self, _layer: usize, _step: usize, positions: &[usize]) -> Vec<T> {
        let n = positions.len();
        let weights: Vec<f64> = match self.kind {
            SourceKind::Uniform => vec![1.0; n],
            SourceKind::Sink => {
                let band = Self::SINK_BAND.min(n);
                let mut w = vec![0.0; n];
                w[0] += 0.5;
                for x in &mut w[n - band..] {
                    *x += 0.5 / band as f64;
                }
                w
            }
            SourceKind::Noisy => (0..n)
                .map(|_| self.rng.sample::<f64, _>(StandardNormal).exp())
                .collect(),
        };
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| T::lit(w / total)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DecodeResult {
    pub steps: usize,
    pub budgets: Vec<usize>,
    /// `per_step_sizes[t][l]`: slots layer `l` holds after step `t`.
    pub per_step_sizes: Vec<Vec<usize>>,
    pub final_positions: Vec<Vec<usize>>,
}

impl DecodeResult {
    pub fn max_sizes(&self) -> Vec<usize> {
        (0..self.budgets.len())
            .map(|l| self.per_step_sizes.iter().map(|s| s[l]).max().unwrap_or(0))
            .collect()
    }
}

/// Decoding with the prefill's final budgets held fixed.
///
/// Each step appends one token to every layer, keeps the last `S_w` decode
/// rows (zero-extended as slots are appended, column-filtered as slots are
/// evicted), rescores the older slots with pooled mean + `gamma` * variance
/// over those rows, protects the newest `S_w` slots, and evicts whenever a
/// layer exceeds its budget.
pub fn decode_simulate<T: Real, S: DecodeAttentionSource<T>>(
    prefill: &PrefillResult<T>,
    source: &mut S,
    steps: usize,
    gamma: T,
    pool: PoolSpec,
) -> Result<DecodeResult> {
    let window = prefill.window;
    let budgets = prefill.final_budgets.budgets.clone();
    if let Some(&b) = budgets.iter().find(|&&b| b < window) {
        return Err(Error::BudgetBelowWindow { budget: b, window });
    }
    let mut caches = prefill.caches.clone();
    let mut windows: Vec<VecDeque<Vec<T>>> = vec![VecDeque::with_capacity(window); caches.len()];
    let mut per_step_sizes = Vec::with_capacity(steps);

    for step in 0..steps {
        let position = prefill.seq_len + step;
        let mut sizes = Vec::with_capacity(caches.len());
        for (layer, (cache, rows)) in caches.iter_mut().zip(&mut windows).enumerate() {
            let (key, value) = synthetic_payload_row(layer, position, cache.key_dim());
            cache.append(position, &key, &value)?;
            for r in rows.iter_mut() {
                r.push(T::zero());
            }

            let row = source.next_row(layer, step, cache.positions());
            if row.len() != cache.len() {
                return Err(Error::RowLength {
                    expected: cache.len(),
                    got: row.len(),
                });
            }
            if let Some((col, &x)) = row
                .iter()
                .enumerate()
                .find(|(_, x)| x.is_nan() || **x < T::zero())
            {
                return Err(if x.is_nan() {
                    Error::NonFinite("decode attention row")
                } else {
                    Error::NegativeEntry {
                        row: step,
                        col,
                        value: x.as_f64(),
                    }
                });
            }
            rows.push_back(row);
            if rows.len() > window {
                rows.pop_front();
            }

            let n = cache.len();
            let protected = window.min(n);
            let observed = Matrix::from_rows(rows.make_contiguous())?;
            let scores = window_scores(&observed, n - protected, gamma, pool)?;
            cache.set_indicator(Indicator::new(scores, protected)?)?;

            if n > budgets[layer] {
                let keep = top_k_positions(cache.indicator(), budgets[layer])?;
                *cache = cache.retain(&keep);
                for r in rows.iter_mut() {
                    *r = keep.iter().map(|&i| r[i]).collect();
                }
            }
            sizes.push(cache.len());
        }
        per_step_sizes.push(sizes);
    }

    Ok(DecodeResult {
        steps,
        budgets,
        per_step_sizes,
        final_positions: caches.iter().map(|c| c.positions().to_vec()).collect(),
    })
}
