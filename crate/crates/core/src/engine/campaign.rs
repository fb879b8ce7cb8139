//! Randomized checks of the two structural guarantees: staged budgets never
//! grow, and staged eviction equals a single eviction with the final budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::prefill::verify_staged_eviction;
use crate::alloc::{
    allocate_final, allocate_stage, verify_budget_decrease_exact, BudgetSchedule, LayerBounds,
};
use crate::error::Result;
use crate::eviction::{Indicator, Score};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CampaignSummary {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl CampaignSummary {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            failures: 0,
            first_failure: None,
        }
    }

    fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.failures += 1;
            self.first_failure.get_or_insert_with(describe);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random indicator of `1..=max_size` slots with an Omega suffix. Half the
/// instances draw scores from eight levels so ties are common.
pub fn random_indicator(rng: &mut impl Rng, max_size: usize) -> Indicator<f64> {
    let n = rng.random_range(1..=max_size.max(1));
    let protected = rng.random_range(0..=n.min(32));
    let coarse = rng.random_bool(0.5);
    let mut scores: Vec<Score<f64>> = (0..n - protected)
        .map(|_| {
            Score::Finite(if coarse {
                f64::from(rng.random_range(0..8u8)) / 8.0
            } else {
                rng.random::<f64>()
            })
        })
        .collect();
    scores.extend(std::iter::repeat_n(Score::Omega, protected));
    Indicator::from_scores(scores).expect("omega suffix")
}

/// Non-increasing schedule of `1..=max_stages` budgets in
/// `[omega_count, len + 8]`, repeats allowed.
pub fn random_schedule(rng: &mut impl Rng, ind: &Indicator<f64>, max_stages: usize) -> Vec<usize> {
    let stages = rng.random_range(1..=max_stages.max(1));
    let mut s: Vec<usize> = (0..stages)
        .map(|_| rng.random_range(ind.omega_count()..=ind.len() + 8))
        .collect();
    s.sort_unstable_by(|a, b| b.cmp(a));
    s
}

pub fn staged_eviction_campaign(
    count: usize,
    max_size: usize,
    max_stages: usize,
    seed: u64,
) -> Result<CampaignSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = CampaignSummary::new("staged eviction equals single eviction");
    for trial in 0..count {
        let ind = random_indicator(&mut rng, max_size);
        let schedule = random_schedule(&mut rng, &ind, max_stages);
        let ok = verify_staged_eviction(&ind, &schedule, 2)?;
        summary.record(ok, || {
            format!("trial {trial}: {} slots, schedule {schedule:?}", ind.len())
        });
    }
    Ok(summary)
}

/// Random strictly positive preferences spanning many orders of magnitude.
pub fn random_preferences(rng: &mut impl Rng, max_layers: usize) -> Vec<f64> {
    let layers = rng.random_range(1..=max_layers.max(1));
    (0..layers)
        .map(|_| rng.random_range(-20.0f64..20.0).exp())
        .collect()
}

/// Per trial: the unrounded staged budgets strictly decrease (exact
/// arithmetic), the integer schedule never grows, the final stage conserves
/// the total, and it is within one unit per layer of the one-shot split.
pub fn budget_decrease_campaign(
    count: usize,
    max_layers: usize,
    seed: u64,
) -> Result<CampaignSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = CampaignSummary::new("staged budgets decrease monotonically");
    for trial in 0..count {
        let prefs = random_preferences(&mut rng, max_layers);
        let layers = prefs.len();
        let window = rng.random_range(1..=8);
        let total = rng.random_range(layers * (window + 1)..=layers * 512);
        // caps never bind: every layer may take the whole budget
        let bounds = LayerBounds::uniform(layers, window + 1, total);

        let exact = verify_budget_decrease_exact(&prefs, total);
        let mut schedule = BudgetSchedule::default();
        for m in 0..layers {
            let stage = allocate_stage(&prefs[..=m], total, schedule.final_allocation(), &bounds)?;
            schedule.stages.push(stage);
        }
        let last = schedule.final_allocation().expect("at least one layer");
        let oneshot = allocate_final(&prefs, total, &bounds)?;
        let close = last
            .budgets
            .iter()
            .zip(&oneshot.budgets)
            .all(|(a, b)| a.abs_diff(*b) <= 1);
        let ok = exact && schedule.is_monotone() && last.sum() == total && close;
        summary.record(ok, || {
            format!(
                "trial {trial}: exact={exact} monotone={} sum={} close={close} prefs={prefs:?}",
                schedule.is_monotone(),
                last.sum()
            )
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_campaigns_pass() {
        assert!(staged_eviction_campaign(300, 64, 8, 1).unwrap().passed());
        assert!(budget_decrease_campaign(100, 16, 1).unwrap().passed());
    }

    #[test]
    fn zero_trials_pass_vacuously() {
        let s = staged_eviction_campaign(0, 64, 8, 1).unwrap();
        assert_eq!(s.trials, 0);
        assert!(s.passed());
    }

    #[test]
    fn generated_schedules_are_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let ind = random_indicator(&mut rng, 40);
            let s = random_schedule(&mut rng, &ind, 8);
            assert!(s.windows(2).all(|w| w[1] <= w[0]));
            assert!(*s.last().unwrap() >= ind.omega_count());
        }
    }
}
