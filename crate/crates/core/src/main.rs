use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cake_core::cli::{
    cmd_decode, cmd_prefill, cmd_stats, cmd_synth, cmd_verify, load_trace, CommandOutput,
    PrefillMode, RunConfig, VerifyOptions,
};
use cake_core::engine::{SourceKind, Strategy};
use cake_core::eviction::PoolKind;
use cake_core::report::render;
use cake_core::stats::HeadAggregation;
use cake_core::trace::{Pattern, SyntheticSpec, ValidationMode};

#[derive(Parser)]
#[command(
    name = "cake",
    version,
    about = "Layer-preference KV-cache budgeting and eviction simulator"
)]
struct Cli {
    /// JSON file with engine settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attention trace.
    Synth(SynthArgs),
    /// Per-layer dispersion, shift, preference and budget fractions.
    Stats {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Validation::Lenient)]
        validation: Validation,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run prefill cache management and report budgets, keep-sets and the ledger.
    Prefill {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Cascade)]
        mode: Mode,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized staged-budget and staged-eviction checks.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 1_000)]
        budget_count: usize,
        #[arg(long, default_value_t = 256)]
        max_size: usize,
        #[arg(long, default_value_t = 8)]
        max_stages: usize,
        #[arg(long, default_value_t = 32)]
        max_layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated budgets to check against a random indicator.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefill, then simulate decoding with the resulting budgets fixed.
    Decode {
        trace: PathBuf,
        #[arg(long, default_value_t = 512)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Source::Noisy)]
        source: Source,
        #[arg(long, default_value_t = 0)]
        source_seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Cascade)]
        mode: Mode,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "mixed")]
    pattern: Pattern,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Defaults to the configured window (32).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3.0)]
    sharpness: f64,
    /// Trace file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EngineArgs {
    /// Global budget in token slots per KV head.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    pool_kind: Option<Pool>,
    #[arg(long)]
    pool_kernel: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<Strat>,
    #[arg(long, value_enum)]
    head_aggregation: Option<HeadAgg>,
    #[arg(long)]
    payload_dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Validation {
    Strict,
    Lenient,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cascade,
    Oneshot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Uniform,
    Sink,
    Noisy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    Max,
    Avg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strat {
    Cake,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadAgg {
    Mean,
    Max,
}

impl From<Mode> for PrefillMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Cascade => PrefillMode::Cascade,
            Mode::Oneshot => PrefillMode::Oneshot,
        }
    }
}

impl EngineArgs {
    fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        if self.budget.is_some() {
            cfg.total_budget = self.budget;
        }
        cfg.tau1 = self.tau1.unwrap_or(cfg.tau1);
        cfg.tau2 = self.tau2.unwrap_or(cfg.tau2);
        cfg.gamma = self.gamma.unwrap_or(cfg.gamma);
        if let Some(p) = self.pool_kind {
            cfg.pool_kind = match p {
                Pool::Max => PoolKind::Max,
                Pool::Avg => PoolKind::Avg,
            };
        }
        cfg.pool_kernel = self.pool_kernel.unwrap_or(cfg.pool_kernel);
        if let Some(s) = self.strategy {
            cfg.strategy = match s {
                Strat::Cake => Strategy::Cake,
                Strat::Uniform => Strategy::Uniform,
            };
        }
        if let Some(h) = self.head_aggregation {
            cfg.head_aggregation = match h {
                HeadAgg::Mean => HeadAggregation::Mean,
                HeadAgg::Max => HeadAggregation::Max,
            };
        }
        cfg.payload_dim = self.payload_dim.unwrap_or(cfg.payload_dim);
        cfg
    }
}

fn emit(output: &CommandOutput, out: Option<&Path>) -> Result<()> {
    let text = render(&output.report)?;
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let base = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let trace_at =
        |p: &Path| load_trace(p).with_context(|| format!("reading trace {}", p.display()));
    let (output, out) = match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                pattern: a.pattern,
                layers: a.layers,
                heads: a.heads,
                seq_len: a.seq_len,
                window: a.window.unwrap_or(base.window),
                seed: a.seed.unwrap_or(base.seed),
                sharpness: a.sharpness,
            };
            (cmd_synth(&spec, &a.out)?, None)
        }
        Command::Stats {
            trace,
            validation,
            engine,
            out,
        } => {
            let mode = match validation {
                Validation::Strict => ValidationMode::Strict,
                Validation::Lenient => ValidationMode::Lenient,
            };
            (
                cmd_stats(&trace_at(&trace)?, &engine.apply(base), mode)?,
                out,
            )
        }
        Command::Prefill {
            trace,
            mode,
            engine,
            out,
        } => (
            cmd_prefill(&trace_at(&trace)?, &engine.apply(base), mode.into())?,
            out,
        ),
        Command::Verify {
            count,
            budget_count,
            max_size,
            max_stages,
            max_layers,
            seed,
            schedule,
            out,
        } => {
            let opts = VerifyOptions {
                count,
                budget_count,
                max_size,
                max_stages,
                max_layers,
                seed,
                schedule,
            };
            (cmd_verify(&opts)?, out)
        }
        Command::Decode {
            trace,
            steps,
            source,
            source_seed,
            mode,
            engine,
            out,
        } => {
            let source = match source {
                Source::Uniform => SourceKind::Uniform,
                Source::Sink => SourceKind::Sink,
                Source::Noisy => SourceKind::Noisy,
            };
            let cfg = engine.apply(base);
            (
                cmd_decode(
                    &trace_at(&trace)?,
                    &cfg,
                    mode.into(),
                    steps,
                    source,
                    source_seed,
                )?,
                out,
            )
        }
    };
    emit(&output, out.as_deref())?;
    Ok(output.ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
