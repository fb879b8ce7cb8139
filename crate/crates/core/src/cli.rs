//! Command implementations behind the `cake` binary. Each command returns a
//! JSON report plus a flag saying whether it ran clean; the binary maps that
//! flag to the exit code.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::alloc::{allocate_final, budget_fractions, LayerBounds};
use crate::engine::campaign::{
    budget_decrease_campaign, random_indicator, staged_eviction_campaign,
};
use crate::engine::{
    decode_simulate, ledger_report, prefill_cascade, prefill_oneshot, verify_staged_eviction,
    EngineConfig, PrefillResult, SourceKind, Strategy, SyntheticSource,
};
use crate::error::{Error, Result};
use crate::eviction::{PoolKind, PoolSpec, Score};
use crate::report::{to_value, SCHEMA_VERSION};
use crate::stats::{HeadAggregation, PreferenceParams};
use crate::trace::{
    read_trace, synth_generate, validate_trace, write_trace, AttentionTrace, SyntheticSpec,
    ValidationMode,
};

/// Engine settings shared by the trace commands. Loaded from `--config`
/// JSON (missing keys take defaults), then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub total_budget: Option<usize>,
    /// Useful range roughly 0.2..2.
    pub tau1: f64,
    /// Useful range roughly 0.4..3.
    pub tau2: f64,
    pub gamma: f64,
    /// Observation window for generated traces; trace files carry their own.
    pub window: usize,
    pub pool_kind: PoolKind,
    pub pool_kernel: usize,
    pub strategy: Strategy,
    pub head_aggregation: HeadAggregation,
    pub payload_dim: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pool = PoolSpec::default();
        Self {
            total_budget: None,
            tau1: 1.0,
            tau2: 1.0,
            gamma: 200.0,
            window: 32,
            pool_kind: pool.kind,
            pool_kernel: pool.kernel,
            strategy: Strategy::Cake,
            head_aggregation: HeadAggregation::Mean,
            payload_dim: 4,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn pool(&self) -> Result<PoolSpec> {
        PoolSpec::new(self.pool_kind, self.pool_kernel)
    }

    pub fn params(&self) -> Result<PreferenceParams<f64>> {
        PreferenceParams::new(self.tau1, self.tau2)
    }

    pub fn engine(&self) -> Result<EngineConfig<f64>> {
        let total_budget = self
            .total_budget
            .ok_or_else(|| Error::InvalidParam("a total budget is required".into()))?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(EngineConfig {
            total_budget,
            params: self.params()?,
            pool: self.pool()?,
            gamma: self.gamma,
            head_aggregation: self.head_aggregation,
            strategy: self.strategy,
            payload_dim: self.payload_dim,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefillMode {
    Cascade,
    Oneshot,
}

/// A command's JSON report and whether it finished without findings.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOutput {
    pub report: Value,
    pub ok: bool,
}

pub fn load_trace(path: &Path) -> Result<AttentionTrace> {
    read_trace(BufReader::new(File::open(path)?))
}

fn trace_summary(trace: &AttentionTrace) -> Value {
    json!({
        "layers": trace.num_layers(),
        "heads": trace.num_heads(),
        "seq_len": trace.seq_len(),
        "window": trace.window(),
        "source": trace.header.source,
    })
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<CommandOutput> {
    let trace = synth_generate(spec)?;
    let findings = validate_trace(&trace, ValidationMode::Strict);
    let mut writer = BufWriter::new(File::create(out)?);
    write_trace(&trace, &mut writer)?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "synth",
        "spec": to_value(spec)?,
        "path": out.display().to_string(),
        "findings": to_value(&findings)?,
    });
    Ok(CommandOutput {
        ok: findings.is_empty(),
        report,
    })
}

/// Per-layer dispersion, shift, preference and budget fraction. When the
/// config carries a total budget the integer allocation is included.
pub fn cmd_stats(
    trace: &AttentionTrace,
    cfg: &RunConfig,
    mode: ValidationMode,
) -> Result<CommandOutput> {
    let findings = validate_trace(trace, mode);
    let params = cfg.params()?;
    let stats = (0..trace.num_layers())
        .map(|l| {
            crate::stats::LayerStats::from_heads(
                &trace.layer_windows::<f64>(l)?,
                &params,
                cfg.head_aggregation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let prefs: Vec<f64> = stats.iter().map(|s| s.preference).collect();
    let fractions = budget_fractions(&prefs);
    let layers: Vec<Value> = stats
        .iter()
        .zip(&fractions)
        .enumerate()
        .map(|(l, (s, f))| {
            json!({
                "layer": l,
                "dispersion": s.dispersion,
                "shift": s.shift,
                "preference": s.preference,
                "fraction": f,
            })
        })
        .collect();
    let budgets = match cfg.total_budget {
        Some(total) => {
            let bounds =
                LayerBounds::uniform(trace.num_layers(), trace.window() + 1, trace.seq_len());
            Some(allocate_final(&prefs, total, &bounds)?.budgets)
        }
        None => None,
    };
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "stats",
        "trace": trace_summary(trace),
        "params": { "tau1": cfg.tau1, "tau2": cfg.tau2, "head_aggregation": cfg.head_aggregation },
        "validation": mode,
        "layers": layers,
        "fraction_sum": fractions.iter().sum::<f64>(),
        "budgets": budgets,
        "findings": findings,
    });
    Ok(CommandOutput {
        report: to_value(&report)?,
        ok: findings.is_empty(),
    })
}

fn indicator_values(result: &PrefillResult<f64>) -> Vec<Vec<Value>> {
    result
        .caches
        .iter()
        .map(|c| {
            c.indicator()
                .scores()
                .iter()
                .map(|s| match s {
                    Score::Finite(x) => json!(x),
                    Score::Omega => json!("omega"),
                })
                .collect()
        })
        .collect()
}

pub fn run_prefill(
    trace: &AttentionTrace,
    cfg: &RunConfig,
    mode: PrefillMode,
) -> Result<PrefillResult<f64>> {
    let engine = cfg.engine()?;
    match mode {
        PrefillMode::Cascade => prefill_cascade(trace, &engine),
        PrefillMode::Oneshot => prefill_oneshot(trace, &engine),
    }
}

fn prefill_value(result: &PrefillResult<f64>) -> Result<Value> {
    let ledger = ledger_report(result);
    let stats: Vec<Value> = result
        .stats
        .iter()
        .enumerate()
        .map(|(l, s)| json!({"layer": l, "dispersion": s.dispersion, "shift": s.shift, "preference": s.preference}))
        .collect();
    to_value(&json!({
        "final_budgets": result.final_budgets.budgets,
        "total_budget": result.final_budgets.total,
        "schedule": result.schedule.stages.iter().map(|s| &s.budgets).collect::<Vec<_>>(),
        "stats": stats,
        "keep_sets": result.keep_sets(),
        "indicators": indicator_values(result),
        "ledger": ledger,
    }))
}

pub fn cmd_prefill(
    trace: &AttentionTrace,
    cfg: &RunConfig,
    mode: PrefillMode,
) -> Result<CommandOutput> {
    let result = run_prefill(trace, cfg, mode)?;
    let within = mode == PrefillMode::Oneshot || ledger_report(&result).within_bound;
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "prefill",
        "mode": mode,
        "strategy": cfg.strategy,
        "trace": trace_summary(trace),
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut report, prefill_value(&result)?) {
        dst.extend(src);
    }
    Ok(CommandOutput {
        report: to_value(&report)?,
        ok: within && result.schedule.is_monotone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub count: usize,
    pub budget_count: usize,
    pub max_size: usize,
    pub max_stages: usize,
    pub max_layers: usize,
    pub seed: u64,
    /// Extra schedule to check against a random indicator.
    pub schedule: Option<Vec<usize>>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            count: 10_000,
            budget_count: 1_000,
            max_size: 256,
            max_stages: 8,
            max_layers: 32,
            seed: 0,
            schedule: None,
        }
    }
}

pub fn cmd_verify(opts: &VerifyOptions) -> Result<CommandOutput> {
    let staged = staged_eviction_campaign(opts.count, opts.max_size, opts.max_stages, opts.seed)?;
    let budgets = budget_decrease_campaign(opts.budget_count, opts.max_layers, opts.seed)?;
    let explicit = match &opts.schedule {
        Some(schedule) => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
            let last = *schedule.last().ok_or(Error::Empty("schedule"))?;
            // keep drawing until the protected suffix fits the final budget
            let ind = loop {
                let ind = random_indicator(&mut rng, opts.max_size);
                if ind.omega_count() <= last {
                    break ind;
                }
            };
            Some(verify_staged_eviction(&ind, schedule, 2)?)
        }
        None => None,
    };
    let ok = staged.passed() && budgets.passed() && explicit != Some(false);
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "verify",
        "seed": opts.seed,
        "campaigns": [staged, budgets],
        "explicit_schedule": explicit,
        "passed": ok,
    });
    Ok(CommandOutput {
        report: to_value(&report)?,
        ok,
    })
}

pub fn cmd_decode(
    trace: &AttentionTrace,
    cfg: &RunConfig,
    mode: PrefillMode,
    steps: usize,
    source: SourceKind,
    source_seed: u64,
) -> Result<CommandOutput> {
    let engine = cfg.engine()?;
    let prefill = run_prefill(trace, cfg, mode)?;
    let mut src = SyntheticSource::new(source, source_seed);
    let decoded = decode_simulate(&prefill, &mut src, steps, engine.gamma, engine.pool)?;
    let max_sizes = decoded.max_sizes();
    let bounded = max_sizes.iter().zip(&decoded.budgets).all(|(s, b)| s <= b);
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "decode",
        "mode": mode,
        "source": source,
        "source_seed": source_seed,
        "trace": trace_summary(trace),
        "steps": decoded.steps,
        "budgets": decoded.budgets,
        "max_sizes": max_sizes,
        "per_step_sizes": decoded.per_step_sizes,
        "final_positions": decoded.final_positions,
    });
    Ok(CommandOutput {
        report: to_value(&report)?,
        ok: bounded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Pattern;

    fn spec(pattern: Pattern, layers: usize) -> SyntheticSpec {
        SyntheticSpec {
            pattern,
            layers,
            heads: 1,
            seq_len: 128,
            window: 32,
            seed: 7,
            sharpness: 3.0,
        }
    }

    #[test]
    fn synth_writes_a_strictly_valid_trace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        let out = cmd_synth(&spec(Pattern::Dispersed, 4), &path).unwrap();
        assert!(out.ok);
        let trace = load_trace(&path).unwrap();
        assert!(validate_trace(&trace, ValidationMode::Strict).is_empty());
        let mut bad = spec(Pattern::Dispersed, 4);
        bad.window = 129;
        assert!(cmd_synth(&bad, &dir.path().join("u.trace")).is_err());
    }

    #[test]
    fn stats_fractions_sum_to_one() {
        let trace = synth_generate(&spec(Pattern::Mixed, 4)).unwrap();
        let out = cmd_stats(&trace, &RunConfig::default(), ValidationMode::Strict).unwrap();
        assert!(out.ok);
        let sum = out.report["fraction_sum"].as_f64().unwrap();
        assert!((sum - 1.0).abs() < 1e-9);
        let single = synth_generate(&spec(Pattern::Sink, 1)).unwrap();
        let out = cmd_stats(&single, &RunConfig::default(), ValidationMode::Strict).unwrap();
        assert_eq!(out.report["layers"][0]["fraction"].as_f64(), Some(1.0));
    }

    #[test]
    fn prefill_needs_a_budget() {
        let trace = synth_generate(&spec(Pattern::Mixed, 2)).unwrap();
        assert!(cmd_prefill(&trace, &RunConfig::default(), PrefillMode::Cascade).is_err());
    }

    #[test]
    fn config_file_keys_are_checked() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"total_budget": 64, "pool_kind": "avg"}"#).unwrap();
        assert_eq!(cfg.pool_kind, PoolKind::Avg);
        assert_eq!(cfg.gamma, 200.0);
        assert!(serde_json::from_str::<RunConfig>(r#"{"budget": 64}"#).is_err());
    }

    #[test]
    fn verify_rejects_increasing_schedule() {
        let opts = VerifyOptions {
            count: 0,
            budget_count: 0,
            schedule: Some(vec![3, 5]),
            ..VerifyOptions::default()
        };
        assert!(matches!(
            cmd_verify(&opts),
            Err(Error::IncreasingSchedule { .. })
        ));
        let opts = VerifyOptions {
            count: 0,
            budget_count: 0,
            ..VerifyOptions::default()
        };
        assert!(cmd_verify(&opts).unwrap().ok);
    }
}
