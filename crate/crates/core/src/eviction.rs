//! Eviction indicator and top-k slot retention.
//!
//! A slot's score is the mean plus `gamma` times the population variance of
//! the attention it received over the observation window, smoothed by a 1-D
//! pool. The `S_w` most recent slots get [`Score::Omega`], which orders above
//! every finite score, so they always survive. Selection uses a strict total
//! order (score descending, then slot index descending), which makes the
//! top-`b` set nested in the top-`b'` set for every `b <= b'`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{mean_pop_var, Real};
use crate::stats::WindowAttention;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Score<T> {
    Finite(T),
    /// Protected slot.
    Omega,
}

impl<T: Real> Score<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            Score::Finite(x) => Some(x),
            Score::Omega => None,
        }
    }

    pub fn is_omega(self) -> bool {
        matches!(self, Score::Omega)
    }

    /// Omega above everything; finite scores by value.
    pub fn rank(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Score::Omega, Score::Omega) => Ordering::Equal,
            (Score::Omega, _) => Ordering::Greater,
            (_, Score::Omega) => Ordering::Less,
            (Score::Finite(a), Score::Finite(b)) => a.partial_cmp(b).unwrap_or(Ordering::Equal),
        }
    }
}

/// Per-slot scores aligned with a layer cache. Omega entries form a suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct Indicator<T> {
    scores: Vec<Score<T>>,
}

impl<T: Real> Indicator<T> {
    /// Finite scores for the older slots followed by `protected` Omegas.
    pub fn new(finite: Vec<T>, protected: usize) -> Result<Self> {
        let mut scores: Vec<Score<T>> = finite.into_iter().map(Score::Finite).collect();
        scores.extend(std::iter::repeat_n(Score::Omega, protected));
        Self::from_scores(scores)
    }

    pub fn from_scores(scores: Vec<Score<T>>) -> Result<Self> {
        let first_omega = scores
            .iter()
            .position(|s| s.is_omega())
            .unwrap_or(scores.len());
        if scores[first_omega..].iter().any(|s| !s.is_omega()) {
            return Err(Error::InvalidParam(
                "protected slots must be the most recent ones".into(),
            ));
        }
        for s in &scores[..first_omega] {
            match s {
                Score::Finite(x) if !x.is_finite() => return Err(Error::NonFinite("indicator")),
                Score::Finite(x) if *x < T::zero() => {
                    return Err(Error::InvalidParam(format!("negative indicator score {x}")))
                }
                _ => {}
            }
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[Score<T>] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn omega_count(&self) -> usize {
        self.scores
            .iter()
            .rev()
            .take_while(|s| s.is_omega())
            .count()
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Stride-1 pooling with truncated windows at the edges, so the output has
/// the input's length. `kernel` must be odd; 1 disables pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
}

impl PoolSpec {
    pub const IDENTITY: PoolSpec = PoolSpec {
        kind: PoolKind::Max,
        kernel: 1,
    };

    pub fn new(kind: PoolKind, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!(
                "pool kernel must be odd and positive, got {kernel}"
            )));
        }
        Ok(Self { kind, kernel })
    }
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            kind: PoolKind::Max,
            kernel: 7,
        }
    }
}

pub fn pool_1d<T: Real>(scores: &[T], spec: PoolSpec) -> Result<Vec<T>> {
    let spec = PoolSpec::new(spec.kind, spec.kernel)?;
    if spec.kernel == 1 {
        return Ok(scores.to_vec());
    }
    let half = spec.kernel / 2;
    Ok((0..scores.len())
        .map(|i| {
            let window = &scores[i.saturating_sub(half)..(i + half + 1).min(scores.len())];
            match spec.kind {
                PoolKind::Max => window.iter().copied().fold(T::neg_infinity(), T::max),
                PoolKind::Avg => {
                    window.iter().fold(T::zero(), |a, &x| a + x) / T::from_count(window.len())
                }
            }
        })
        .collect())
}

/// Mean + `gamma` * population variance of each column of `rows` (the
/// observation window), restricted to the first `cols` columns, then pooled.
pub(crate) fn window_scores<T: Real>(
    rows: &Matrix<T>,
    cols: usize,
    gamma: T,
    pool: PoolSpec,
) -> Result<Vec<T>> {
    let mut column = Vec::with_capacity(rows.rows());
    let raw: Vec<T> = (0..cols)
        .map(|c| {
            column.clear();
            column.extend(rows.column(c));
            let (mean, var) = mean_pop_var(&column);
            mean + gamma * var
        })
        .collect();
    pool_1d(&raw, pool)
}

fn check_gamma<T: Real>(gamma: T) -> Result<()> {
    if !gamma.is_finite() || gamma < T::zero() {
        return Err(Error::InvalidParam(format!(
            "gamma must be finite and non-negative, got {gamma}"
        )));
    }
    Ok(())
}

/// Indicator of one head over all `S` slots: pooled mean/variance scores on
/// `0..S - S_w`, Omega on the last `S_w`.
pub fn build_indicator<T: Real>(
    win: &WindowAttention<T>,
    gamma: T,
    pool: PoolSpec,
) -> Result<Indicator<T>> {
    check_gamma(gamma)?;
    let cols = win.seq_len() - win.window();
    let scores = window_scores(win.rows(), cols, gamma, pool)?;
    Indicator::new(scores, win.window())
}

/// Arithmetic mean of per-head indicators, giving one keep-set per layer.
pub fn combine_heads<T: Real>(heads: &[Indicator<T>]) -> Result<Indicator<T>> {
    let first = heads.first().ok_or(Error::Empty("head list"))?;
    if heads
        .iter()
        .any(|h| h.len() != first.len() || h.omega_count() != first.omega_count())
    {
        return Err(Error::Shape("head indicators disagree in shape".into()));
    }
    let n = T::from_count(heads.len());
    let finite_len = first.len() - first.omega_count();
    let mean = (0..finite_len)
        .map(|i| {
            heads
                .iter()
                .map(|h| h.scores[i].finite().unwrap_or_else(T::zero))
                .fold(T::zero(), |a, x| a + x)
                / n
        })
        .collect();
    Indicator::new(mean, first.omega_count())
}

/// Layer indicator from all heads of one layer.
pub fn layer_indicator<T: Real>(
    heads: &[WindowAttention<T>],
    gamma: T,
    pool: PoolSpec,
) -> Result<Indicator<T>> {
    let per_head = heads
        .iter()
        .map(|w| build_indicator(w, gamma, pool))
        .collect::<Result<Vec<_>>>()?;
    combine_heads(&per_head)
}

/// The `budget` highest-ranked slots, ascending by slot index.
pub fn top_k_positions<T: Real>(ind: &Indicator<T>, budget: usize) -> Result<Vec<usize>> {
    if budget > ind.len() {
        return Err(Error::BudgetAboveSlots {
            budget,
            slots: ind.len(),
        });
    }
    let window = ind.omega_count();
    if budget < window {
        return Err(Error::BudgetBelowWindow { budget, window });
    }
    let mut order: Vec<usize> = (0..ind.len()).collect();
    let rank = |a: &usize, b: &usize| ind.scores[*b].rank(&ind.scores[*a]).then(b.cmp(a));
    if budget < order.len() && budget > 0 {
        order.select_nth_unstable_by(budget - 1, rank);
    }
    order.truncate(budget);
    order.sort_unstable();
    Ok(order)
}

/// Retained slots of one layer: original token positions, a synthetic K/V
/// payload row per slot, and the eviction indicator, all aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheLayer<T> {
    positions: Vec<usize>,
    keys: Matrix<T>,
    values: Matrix<T>,
    indicator: Indicator<T>,
}

impl<T: Real> KvCacheLayer<T> {
    pub fn new(
        positions: Vec<usize>,
        keys: Matrix<T>,
        values: Matrix<T>,
        indicator: Indicator<T>,
    ) -> Result<Self> {
        let n = positions.len();
        if keys.rows() != n || values.rows() != n || indicator.len() != n {
            return Err(Error::Shape(format!(
                "{n} positions, {} key rows, {} value rows, {} indicator entries",
                keys.rows(),
                values.rows(),
                indicator.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParam(
                "positions must strictly increase".into(),
            ));
        }
        Ok(Self {
            positions,
            keys,
            values,
            indicator,
        })
    }

    /// Full cache over positions `0..indicator.len()` with the payload from
    /// [`synthetic_payload_row`].
    pub fn synthetic(layer: usize, dim: usize, indicator: Indicator<T>) -> Result<Self> {
        let n = indicator.len();
        let mut keys = Matrix::filled(0, dim, T::zero());
        let mut values = Matrix::filled(0, dim, T::zero());
        for p in 0..n {
            let (k, v) = synthetic_payload_row(layer, p, dim);
            keys.push_row(&k)?;
            values.push_row(&v)?;
        }
        Self::new((0..n).collect(), keys, values, indicator)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.keys
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn indicator(&self) -> &Indicator<T> {
        &self.indicator
    }

    pub fn key_dim(&self) -> usize {
        self.keys.cols()
    }

    pub(crate) fn set_indicator(&mut self, indicator: Indicator<T>) -> Result<()> {
        if indicator.len() != self.len() {
            return Err(Error::Shape(format!(
                "indicator of length {} for {} slots",
                indicator.len(),
                self.len()
            )));
        }
        self.indicator = indicator;
        Ok(())
    }

    /// Appends one slot; its indicator entry is Omega until recomputed.
    pub(crate) fn append(&mut self, position: usize, key: &[T], value: &[T]) -> Result<()> {
        if self.positions.last().is_some_and(|&p| p >= position) {
            return Err(Error::InvalidParam(format!(
                "appended position {position} is not newer than the cache"
            )));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.positions.push(position);
        self.indicator.scores.push(Score::Omega);
        Ok(())
    }

    pub(crate) fn retain(&self, keep: &[usize]) -> Self {
        Self {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            keys: self.keys.select_rows(keep),
            values: self.values.select_rows(keep),
            indicator: self.indicator.select(keep),
        }
    }
}

/// Deterministic payload row for `(layer, position)`. Distinct positions get
/// distinct rows, so slot identity can be checked through eviction.
pub fn synthetic_payload_row<T: Real>(
    layer: usize,
    position: usize,
    dim: usize,
) -> (Vec<T>, Vec<T>) {
    let base = (layer * 1_000_003 + position) as f64;
    let key = (0..dim).map(|j| T::lit(base + j as f64 / 16.0)).collect();
    let value = (0..dim).map(|j| T::lit(-base - j as f64 / 16.0)).collect();
    (key, value)
}

/// Keeps the top-`budget` slots of the cache's indicator, filtering
/// positions, payload rows and indicator entries together. A cache already
/// within budget is returned as is.
pub fn evict<T: Real>(cache: KvCacheLayer<T>, budget: usize) -> Result<KvCacheLayer<T>> {
    let window = cache.indicator.omega_count();
    if budget < window {
        return Err(Error::BudgetBelowWindow { budget, window });
    }
    if cache.len() <= budget {
        return Ok(cache);
    }
    let keep = top_k_positions(&cache.indicator, budget)?;
    Ok(cache.retain(&keep))
}
