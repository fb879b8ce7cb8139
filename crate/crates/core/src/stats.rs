//! Per-layer attention statistics: spatial dispersion (summed row entropy),
//! temporal shift (summed column variance) and the preference score built
//! from them.
//!
//! Everything here reads the leading `S - S_w` columns of the last `S_w`
//! attention rows. Rows of that submatrix are not renormalized; the
//! entropy term `-x ln x` is applied to the raw entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{mean_pop_var, sum, Real};

/// The last `S_w` attention rows of one head, each over all `S` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAttention<T> {
    pub layer: usize,
    pub head: usize,
    rows: Matrix<T>,
}

impl<T: Real> WindowAttention<T> {
    pub fn new(layer: usize, head: usize, rows: Matrix<T>) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Empty("observation window"));
        }
        if rows.rows() > rows.cols() {
            return Err(Error::Shape(format!(
                "window {} exceeds sequence length {}",
                rows.rows(),
                rows.cols()
            )));
        }
        for (r, row) in rows.iter_rows().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite("window attention"));
                }
                if x < T::zero() {
                    return Err(Error::NegativeEntry {
                        row: r,
                        col: c,
                        value: x.as_f64(),
                    });
                }
            }
        }
        Ok(Self { layer, head, rows })
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.rows.cols()
    }

    pub fn window(&self) -> usize {
        self.rows.rows()
    }

    /// Largest `|row sum - 1|` over the window.
    pub fn worst_row_deviation(&self) -> T {
        self.rows
            .iter_rows()
            .map(|r| (sum(r.iter().copied()) - T::one()).abs())
            .fold(T::zero(), T::max)
    }

    /// Columns `0..S - S_w`, the part the statistics are computed on.
    pub fn stat_submatrix(&self) -> Result<StatSubmatrix<'_, T>> {
        StatSubmatrix::leading(&self.rows, self.seq_len() - self.window())
    }
}

/// Borrowed view of the leading `cols` columns of a matrix.
#[derive(Clone, Copy, Debug)]
pub struct StatSubmatrix<'a, T> {
    values: &'a Matrix<T>,
    cols: usize,
}

impl<'a, T: Real> StatSubmatrix<'a, T> {
    /// The whole matrix.
    pub fn new(values: &'a Matrix<T>) -> Result<Self> {
        Self::leading(values, values.cols())
    }

    pub fn leading(values: &'a Matrix<T>, cols: usize) -> Result<Self> {
        if values.rows() == 0 || cols == 0 {
            return Err(Error::Empty("statistics submatrix"));
        }
        if cols > values.cols() {
            return Err(Error::Shape(format!(
                "{cols} columns requested from a {}-column matrix",
                values.cols()
            )));
        }
        Ok(Self { values, cols })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        &self.values.row(r)[..self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        self.values.column(c).collect()
    }
}

/// `-sum x ln x` over every entry, with `0 ln 0 = 0`.
pub fn spatial_dispersion<T: Real>(sub: &StatSubmatrix<'_, T>) -> Result<T> {
    let mut total = T::zero();
    for r in 0..sub.rows() {
        for (c, &x) in sub.row(r).iter().enumerate() {
            if x < T::zero() {
                return Err(Error::NegativeEntry {
                    row: r,
                    col: c,
                    value: x.as_f64(),
                });
            }
            if !x.is_finite() {
                return Err(Error::NonFinite("statistics submatrix"));
            }
            if x > T::zero() {
                total = total - x * x.ln();
            }
        }
    }
    // entries above 1 would make individual terms negative; clamp the sum
    Ok(total.max(T::zero()))
}

/// Sum over columns of the population variance across window rows.
pub fn temporal_shift<T: Real>(sub: &StatSubmatrix<'_, T>) -> Result<T> {
    let mut total = T::zero();
    let mut column = Vec::with_capacity(sub.rows());
    for c in 0..sub.cols() {
        column.clear();
        column.extend((0..sub.rows()).map(|r| sub.row(r)[c]));
        if column.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("statistics submatrix"));
        }
        total = total + mean_pop_var(&column).1;
    }
    Ok(total)
}

/// How per-head `(H, V)` pairs are folded into one per layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

pub fn aggregate_heads<T: Real>(per_head: &[(T, T)], how: HeadAggregation) -> Result<(T, T)> {
    if per_head.is_empty() {
        return Err(Error::Empty("head list"));
    }
    Ok(match how {
        HeadAggregation::Mean => {
            let n = T::from_count(per_head.len());
            (
                sum(per_head.iter().map(|p| p.0)) / n,
                sum(per_head.iter().map(|p| p.1)) / n,
            )
        }
        HeadAggregation::Max => per_head
            .iter()
            .fold((T::zero(), T::zero()), |(h, v), &(a, b)| {
                (h.max(a), v.max(b))
            }),
    })
}

/// Temperatures applied to dispersion and shift. Both must be positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceParams<T> {
    pub tau1: T,
    pub tau2: T,
}

impl<T: Real> PreferenceParams<T> {
    pub fn new(tau1: T, tau2: T) -> Result<Self> {
        let ok = |t: T| t.is_finite() && t > T::zero();
        if !ok(tau1) || !ok(tau2) {
            return Err(Error::InvalidParam(format!(
                "temperatures must be positive, got tau1={tau1}, tau2={tau2}"
            )));
        }
        Ok(Self { tau1, tau2 })
    }
}

impl<T: Real> Default for PreferenceParams<T> {
    fn default() -> Self {
        Self {
            tau1: T::one(),
            tau2: T::one(),
        }
    }
}

/// `H^(1/tau1) * V^(1/tau2)`.
pub fn layer_preference<T: Real>(
    dispersion: T,
    shift: T,
    params: &PreferenceParams<T>,
) -> Result<T> {
    if !dispersion.is_finite() || !shift.is_finite() {
        return Err(Error::NonFinite("preference inputs"));
    }
    if dispersion < T::zero() || shift < T::zero() {
        return Err(Error::InvalidParam(format!(
            "dispersion and shift must be non-negative, got {dispersion} and {shift}"
        )));
    }
    let params = PreferenceParams::new(params.tau1, params.tau2)?;
    Ok(dispersion.powf(params.tau1.recip()) * shift.powf(params.tau2.recip()))
}

/// Dispersion, shift and preference of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerStats<T> {
    pub dispersion: T,
    pub shift: T,
    pub preference: T,
}

impl<T: Real> LayerStats<T> {
    pub fn new(dispersion: T, shift: T, params: &PreferenceParams<T>) -> Result<Self> {
        Ok(Self {
            dispersion,
            shift,
            preference: layer_preference(dispersion, shift, params)?,
        })
    }

    /// Statistics of one layer from all of its heads' windows.
    pub fn from_heads(
        heads: &[WindowAttention<T>],
        params: &PreferenceParams<T>,
        how: HeadAggregation,
    ) -> Result<Self> {
        let per_head = heads
            .iter()
            .map(|w| {
                let sub = w.stat_submatrix()?;
                Ok((spatial_dispersion(&sub)?, temporal_shift(&sub)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, v) = aggregate_heads(&per_head, how)?;
        Self::new(h, v, params)
    }
}
