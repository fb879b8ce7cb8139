//! Integer per-layer budgets from preference scores.
//!
//! Proportional shares are computed exactly (preferences are converted to
//! rationals without rounding) and rounded by the largest-remainder method,
//! ties going to the lower layer index. Staged allocation additionally
//! clamps every earlier layer to its previous-stage budget so that budgets
//! never grow from one stage to the next.

use std::cmp::Ordering;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Budgets for layers `0..budgets.len()` drawn from a global `total`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetVector {
    pub budgets: Vec<usize>,
    pub total: usize,
}

impl BudgetVector {
    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    pub fn sum(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Stage `m` holds budgets for layers `0..=m`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BudgetSchedule {
    pub stages: Vec<BudgetVector>,
}

impl BudgetSchedule {
    pub fn final_allocation(&self) -> Option<&BudgetVector> {
        self.stages.last()
    }

    /// Per-layer budgets never increase between consecutive stages.
    pub fn is_monotone(&self) -> bool {
        self.stages.windows(2).all(|pair| {
            pair[0]
                .budgets
                .iter()
                .zip(&pair[1].budgets)
                .all(|(before, after)| after <= before)
        })
    }

    /// Budget sequence seen by `layer` from the stage it joined onwards.
    pub fn layer_series(&self, layer: usize) -> Vec<usize> {
        self.stages
            .iter()
            .filter_map(|s| s.budgets.get(layer).copied())
            .collect()
    }
}

/// Per-layer floor and ceiling applied after proportional rounding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBounds {
    pub min_budget: usize,
    pub caps: Vec<usize>,
}

impl LayerBounds {
    pub fn new(min_budget: usize, caps: Vec<usize>) -> Self {
        Self { min_budget, caps }
    }

    /// Same floor and cap for every layer.
    pub fn uniform(layers: usize, min_budget: usize, cap: usize) -> Self {
        Self::new(min_budget, vec![cap; layers])
    }

    pub fn unbounded(layers: usize) -> Self {
        Self::uniform(layers, 0, usize::MAX)
    }

    fn prefix(&self, layers: usize) -> Result<Self> {
        if self.caps.len() < layers {
            return Err(Error::Shape(format!(
                "{} caps for {layers} layers",
                self.caps.len()
            )));
        }
        Ok(Self::new(self.min_budget, self.caps[..layers].to_vec()))
    }
}

fn rational<T: Real>(x: T) -> Result<BigRational> {
    BigRational::from_float(x.as_f64()).ok_or(Error::NonFinite("preference vector"))
}

fn from_count(n: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

/// Largest-remainder split of `units` in proportion to `weights` (not all
/// zero). Ties in the fractional part go to the lower index.
fn apportion(weights: &[BigRational], units: usize) -> Vec<usize> {
    let total: BigRational = weights.iter().fold(BigRational::zero(), |a, w| a + w);
    let units_r = from_count(units);
    let quotas: Vec<BigRational> = weights.iter().map(|w| &units_r * w / &total).collect();
    let mut shares: Vec<usize> = quotas
        .iter()
        .map(|q| q.floor().to_integer().to_usize().expect("share fits usize"))
        .collect();
    let mut left = units - shares.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| quotas[b].fract().cmp(&quotas[a].fract()).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    shares
}

struct Allocation {
    budgets: Vec<usize>,
    /// Unrounded `total * P_l / sum(P)`.
    quotas: Vec<BigRational>,
}

fn allocate_exact<T: Real>(prefs: &[T], total: usize, bounds: &LayerBounds) -> Result<Allocation> {
    let layers = prefs.len();
    if layers == 0 {
        return Err(Error::Empty("preference vector"));
    }
    if bounds.caps.len() != layers {
        return Err(Error::Shape(format!(
            "{} caps for {layers} layers",
            bounds.caps.len()
        )));
    }
    let min = bounds.min_budget;
    if let Some(&cap) = bounds.caps.iter().find(|&&c| c < min) {
        return Err(Error::InvalidParam(format!(
            "layer cap {cap} below minimum budget {min}"
        )));
    }
    if layers.checked_mul(min).is_none_or(|need| total < need) {
        return Err(Error::BudgetTooSmall {
            total,
            layers,
            min_budget: min,
        });
    }
    for &p in prefs {
        if !p.is_finite() {
            return Err(Error::NonFinite("preference vector"));
        }
        if p < T::zero() {
            return Err(Error::InvalidParam(format!("negative preference {p}")));
        }
    }
    let weights = prefs
        .iter()
        .map(|&p| rational(p))
        .collect::<Result<Vec<_>>>()?;
    if weights.iter().all(Zero::is_zero) {
        return Err(Error::DegeneratePreferences);
    }

    let sum_w = weights.iter().fold(BigRational::zero(), |a, w| a + w);
    let total_r = from_count(total);
    let quotas = weights.iter().map(|w| &total_r * w / &sum_w).collect();

    // zero-preference layers sit at the floor; the rest share what is left,
    // with layers that overshoot a cap or undershoot the floor pinned and
    // the remainder re-split among the others
    let mut fixed: Vec<Option<usize>> =
        weights.iter().map(|w| w.is_zero().then_some(min)).collect();
    loop {
        let free: Vec<usize> = (0..layers).filter(|&l| fixed[l].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let pinned: usize = fixed.iter().flatten().sum();
        let remaining = total.saturating_sub(pinned);
        let free_weights: Vec<BigRational> = free.iter().map(|&l| weights[l].clone()).collect();
        let shares = apportion(&free_weights, remaining);

        let over: Vec<usize> = (0..free.len())
            .filter(|&i| shares[i] > bounds.caps[free[i]])
            .collect();
        if !over.is_empty() {
            for i in over {
                fixed[free[i]] = Some(bounds.caps[free[i]]);
            }
            continue;
        }
        let under: Vec<usize> = (0..free.len()).filter(|&i| shares[i] < min).collect();
        if !under.is_empty() {
            for i in under {
                fixed[free[i]] = Some(min);
            }
            continue;
        }
        for (i, &l) in free.iter().enumerate() {
            fixed[l] = Some(shares[i]);
        }
    }
    Ok(Allocation {
        budgets: fixed.into_iter().map(|b| b.unwrap_or(min)).collect(),
        quotas,
    })
}

/// One-shot allocation over all layers.
///
/// Budgets are proportional to `prefs`, rounded by largest remainder, then
/// kept within `[bounds.min_budget, bounds.caps[l]]`. The sum equals `total`
/// unless every layer ends up at its cap.
pub fn allocate_final<T: Real>(
    prefs: &[T],
    total: usize,
    bounds: &LayerBounds,
) -> Result<BudgetVector> {
    Ok(BudgetVector {
        budgets: allocate_exact(prefs, total, bounds)?.budgets,
        total,
    })
}

/// Allocation at stage `m = prefs_so_far.len() - 1` of a cascaded prefill.
///
/// Starts from the one-shot allocation over the layers seen so far. Any
/// earlier layer that would exceed its stage `m - 1` budget is clamped back
/// to it, and the freed units are handed out one at a time to layers that
/// still have room, largest unrounded deficit first. The newest layer has
/// no previous budget and only its cap limits it.
pub fn allocate_stage<T: Real>(
    prefs_so_far: &[T],
    total: usize,
    prev: Option<&BudgetVector>,
    bounds: &LayerBounds,
) -> Result<BudgetVector> {
    let layers = prefs_so_far.len();
    let bounds = bounds.prefix(layers)?;
    let newest = layers.saturating_sub(1);
    let prev: &[usize] = match prev {
        None if layers <= 1 => &[],
        Some(p) if p.len() + 1 == layers => &p.budgets,
        _ => {
            return Err(Error::Shape(format!(
                "stage {newest} needs previous budgets for exactly {newest} layers"
            )))
        }
    };
    let Allocation {
        mut budgets,
        quotas,
    } = allocate_exact(prefs_so_far, total, &bounds)?;

    let mut freed = 0;
    let mut clamped = vec![false; layers];
    for l in 0..newest {
        if budgets[l] > prev[l] {
            freed += budgets[l] - prev[l];
            budgets[l] = prev[l];
            clamped[l] = true;
        }
    }
    if freed > 0 {
        let mut order: Vec<usize> = (0..layers).filter(|&l| !clamped[l]).collect();
        let deficit = |l: usize| &quotas[l] - from_count(budgets[l]);
        order.sort_by(|&a, &b| deficit(b).cmp(&deficit(a)).then(a.cmp(&b)));
        let room = |l: usize, b: &[usize]| {
            let limit = if l == newest {
                bounds.caps[l]
            } else {
                prev[l].min(bounds.caps[l])
            };
            b[l] < limit
        };
        while freed > 0 {
            let mut progressed = false;
            for &l in &order {
                if freed > 0 && room(l, &budgets) {
                    budgets[l] += 1;
                    freed -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }
    Ok(BudgetVector { budgets, total })
}

/// Checks that the unrounded staged budgets
/// `B_l(m) = total * P_l / sum_{k<=m} P_k` strictly decrease for every layer
/// over stages `l..L-1`. Comparisons are exact when `T` is exact (e.g.
/// [`crate::Exact`]). Non-positive preferences make the check fail.
pub fn verify_budget_decrease<T>(prefs: &[T], total: &T) -> bool
where
    T: Num + PartialOrd + Clone,
{
    let mut prefix = Vec::with_capacity(prefs.len());
    let mut acc = T::zero();
    for p in prefs {
        acc = acc + p.clone();
        prefix.push(acc.clone());
    }
    for (l, p) in prefs.iter().enumerate() {
        for m in l..prefs.len().saturating_sub(1) {
            let before = total.clone() * p.clone() / prefix[m].clone();
            let after = total.clone() * p.clone() / prefix[m + 1].clone();
            if after.partial_cmp(&before) != Some(Ordering::Less) {
                return false;
            }
        }
    }
    true
}

/// [`verify_budget_decrease`] on floating-point preferences, evaluated exactly.
pub fn verify_budget_decrease_exact<T: Real>(prefs: &[T], total: usize) -> bool {
    match prefs
        .iter()
        .map(|&p| rational(p))
        .collect::<Result<Vec<_>>>()
    {
        Ok(exact) => verify_budget_decrease(&exact, &from_count(total)),
        Err(_) => false,
    }
}

/// Equal split; the first `total % layers` layers get one extra unit.
pub fn uniform_allocate(layers: usize, total: usize) -> Result<BudgetVector> {
    if layers == 0 {
        return Err(Error::Empty("layer list"));
    }
    if total < layers {
        return Err(Error::BudgetTooSmall {
            total,
            layers,
            min_budget: 1,
        });
    }
    let (base, extra) = (total / layers, total % layers);
    Ok(BudgetVector {
        budgets: (0..layers).map(|l| base + usize::from(l < extra)).collect(),
        total,
    })
}

/// `P_l / sum(P)` for reporting; zero vectors give equal fractions.
pub fn budget_fractions<T: Real>(prefs: &[T]) -> Vec<f64> {
    let sum: f64 = prefs.iter().map(|p| p.as_f64()).sum();
    if sum > 0.0 {
        prefs.iter().map(|p| p.as_f64() / sum).collect()
    } else {
        vec![1.0 / prefs.len() as f64; prefs.len()]
    }
}
