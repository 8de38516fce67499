//! Dispatch-overhead micro-benchmarks for ConGo.
//!
//! Each benchmark loads a small module into a fresh [`Runtime`], calls one
//! function from the host in a tight loop, and reports calls per millisecond.
//! Benchmarked bodies return a constant.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use congo_core::context::{ContextDescriptor, ContextFactory, ContextFailure, MetaSet, MetaValue, StoreView};
use congo_core::{lower, parse_source, CachePolicy, DispatchMode, Output, Runtime, RuntimeConfig, RuntimeError};
use serde::Serialize;
use thiserror::Error;

/// Number of stacked layers and nested plain calls in the `*_layered10` benchmarks.
pub const LAYERS: usize = 10;

/// Relative error at or above which a result is flagged unstable.
pub const UNSTABLE_THRESHOLD: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Benchmark {
    PlainSingle,
    ContextualSingle,
    PlainLayered10,
    ContextualLayered10,
}

impl Benchmark {
    pub const ALL: [Benchmark; 4] =
        [Benchmark::PlainSingle, Benchmark::ContextualSingle, Benchmark::PlainLayered10, Benchmark::ContextualLayered10];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::PlainSingle => "plain_single",
            Benchmark::ContextualSingle => "contextual_single",
            Benchmark::PlainLayered10 => "plain_layered10",
            Benchmark::ContextualLayered10 => "contextual_layered10",
        }
    }

    pub fn is_contextual(self) -> bool {
        matches!(self, Benchmark::ContextualSingle | Benchmark::ContextualLayered10)
    }

    /// Function the harness calls once per operation.
    pub fn entry(self) -> &'static str {
        match self {
            Benchmark::PlainSingle => "plain",
            Benchmark::ContextualSingle => "contextual",
            Benchmark::PlainLayered10 => "p9",
            Benchmark::ContextualLayered10 => "stacked",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Benchmark::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| format!("unknown benchmark `{s}`"))
    }
}

/// Source of the module shared by all benchmarks.
pub fn program_source() -> String {
    let mut src = String::from("module bench.dispatch\n\ncontexts = [Tiers()]\n\n");
    src.push_str("function plain = || -> 1\n\n");
    src.push_str("function contextual = || -> 0\nfunction contextual = ||@(Tiers=T0) -> 1\n\n");
    src.push_str("function p0 = || -> 1\n");
    for i in 1..LAYERS {
        src.push_str(&format!("function p{i} = || -> p{}()\n", i - 1));
    }
    src.push_str("\nfunction stacked = || -> 1\n");
    for i in 0..LAYERS {
        src.push_str(&format!("function stacked = ||@(Tiers=T{i}) -> proceed()\n"));
    }
    src
}

/// A static context reporting all of `T0`..`T9` at once, so every layer of
/// the stacked benchmark is eligible.
#[derive(Debug, Default)]
pub struct Tiers;

impl ContextDescriptor for Tiers {
    fn name(&self) -> &str {
        "Tiers"
    }

    fn evaluate(&self, _store: &StoreView<'_>) -> Result<MetaSet, ContextFailure> {
        Ok((0..LAYERS).map(|i| MetaValue::new(format!("T{i}"))).collect())
    }
}

/// The built-in contexts plus [`Tiers`].
pub fn context_factory() -> ContextFactory {
    let mut factory = ContextFactory::builtin();
    factory.register("Tiers", || Arc::new(Tiers));
    factory
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub warmup_iters: u32,
    pub measure_iters: u32,
    pub iter_duration: Duration,
    pub mode: DispatchMode,
    pub cache: CachePolicy,
    pub benchmarks: Vec<Benchmark>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_iters: 5,
            measure_iters: 10,
            iter_duration: Duration::from_secs(1),
            mode: DispatchMode::Event,
            cache: CachePolicy::None,
            benchmarks: Benchmark::ALL.to_vec(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchHarnessError> {
        if self.warmup_iters < 1 {
            return Err(BenchHarnessError::InvalidConfig("warmup iterations must be at least 1".into()));
        }
        if self.measure_iters < 3 {
            return Err(BenchHarnessError::InvalidConfig("measurement iterations must be at least 3".into()));
        }
        if self.iter_duration.is_zero() {
            return Err(BenchHarnessError::InvalidConfig("iteration duration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub benchmark: String,
    pub mode: String,
    pub cache: String,
    pub throughput_ops_per_ms: f64,
    pub relative_error: f64,
}

impl BenchResult {
    pub fn is_unstable(&self) -> bool {
        self.relative_error.partial_cmp(&UNSTABLE_THRESHOLD) != Some(std::cmp::Ordering::Less)
    }

    fn is(&self, benchmark: Benchmark, mode: DispatchMode, cache: CachePolicy) -> bool {
        self.benchmark == benchmark.name() && self.mode == mode.as_str() && self.cache == cache.as_str()
    }
}

#[derive(Debug, Error)]
pub enum BenchHarnessError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("benchmark program failed to load: {0}")]
    Load(String),
    #[error("{benchmark} raised {source}")]
    Iteration {
        benchmark: Benchmark,
        #[source]
        source: RuntimeError,
    },
}

/// Starts a runtime on the benchmark module.
pub fn start_runtime(mode: DispatchMode, cache: CachePolicy) -> Result<Runtime, BenchHarnessError> {
    let ast = parse_source(&program_source(), "bench.congo").map_err(|e| BenchHarnessError::Load(e.to_string()))?;
    let module = lower(&ast).map_err(|e| BenchHarnessError::Load(e.to_string()))?;
    let config = RuntimeConfig {
        dispatch: mode,
        cache,
        context_factory: context_factory(),
        output: Output::Buffer(Default::default()),
        ..RuntimeConfig::default()
    };
    Runtime::new(module, config).map_err(|e| BenchHarnessError::Load(e.to_string()))
}

/// Calls performed per clock read.
const BATCH: u64 = 8;

/// Runs one timed iteration and returns calls per millisecond.
fn iteration(rt: &mut Runtime, benchmark: Benchmark, duration: Duration) -> Result<f64, BenchHarnessError> {
    let entry = benchmark.entry();
    let start = Instant::now();
    let mut calls = 0u64;
    loop {
        for _ in 0..BATCH {
            rt.call(entry, Vec::new()).map_err(|source| BenchHarnessError::Iteration { benchmark, source })?;
        }
        calls += BATCH;
        let elapsed = start.elapsed();
        if elapsed >= duration {
            return Ok(calls as f64 / (elapsed.as_secs_f64() * 1e3));
        }
    }
}

/// Mean and standard error of the mean over `samples`, as (mean, stderr / mean).
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 || mean == 0.0 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt() / mean)
}

/// Runs one benchmark in a fresh runtime: warmup, then measurement.
pub fn run_benchmark(
    benchmark: Benchmark,
    config: &BenchConfig,
) -> Result<BenchResult, BenchHarnessError> {
    config.validate()?;
    let mut rt = start_runtime(config.mode, config.cache)?;
    for _ in 0..config.warmup_iters {
        iteration(&mut rt, benchmark, config.iter_duration)?;
    }
    let samples = (0..config.measure_iters)
        .map(|_| iteration(&mut rt, benchmark, config.iter_duration))
        .collect::<Result<Vec<_>, _>>()?;
    rt.shutdown();
    let (throughput, relative_error) = summarize(&samples);
    Ok(BenchResult {
        benchmark: benchmark.name().to_string(),
        mode: config.mode.as_str().to_string(),
        cache: config.cache.as_str().to_string(),
        throughput_ops_per_ms: throughput,
        relative_error,
    })
}

pub fn run_benchmarks(config: &BenchConfig) -> Result<Vec<BenchResult>, BenchHarnessError> {
    config.benchmarks.iter().map(|b| run_benchmark(*b, config)).collect()
}

/// The (mode, cache, benchmarks) combinations needed by [`check_properties`].
pub fn default_plan() -> Vec<(DispatchMode, CachePolicy, Vec<Benchmark>)> {
    use Benchmark::*;
    vec![
        (DispatchMode::Event, CachePolicy::None, vec![PlainSingle, ContextualSingle, PlainLayered10, ContextualLayered10]),
        (DispatchMode::Direct, CachePolicy::None, vec![PlainSingle, ContextualSingle, ContextualLayered10]),
        (DispatchMode::Event, CachePolicy::EpochGuard, vec![ContextualSingle, ContextualLayered10]),
    ]
}

/// Runs every combination of `plan` with the iteration settings of `base`.
pub fn run_plan(
    base: &BenchConfig,
    plan: &[(DispatchMode, CachePolicy, Vec<Benchmark>)],
    mut progress: impl FnMut(&BenchResult),
) -> Result<Vec<BenchResult>, BenchHarnessError> {
    let mut results = Vec::new();
    for (mode, cache, benchmarks) in plan {
        let config = BenchConfig { mode: *mode, cache: *cache, benchmarks: benchmarks.clone(), ..base.clone() };
        for b in benchmarks {
            let result = run_benchmark(*b, &config)?;
            progress(&result);
            results.push(result);
        }
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropertyStatus {
    Pass,
    Fail,
    /// The inputs exceeded the relative-error bound.
    Unstable,
    /// A required result was not measured.
    Skipped,
}

impl PropertyStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PropertyStatus::Pass => "PASS",
            PropertyStatus::Fail => "FAIL",
            PropertyStatus::Unstable => "UNSTABLE",
            PropertyStatus::Skipped => "SKIPPED",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub status: PropertyStatus,
    pub detail: String,
}

/// Checks the throughput orderings between measured results.
pub fn check_properties(results: &[BenchResult]) -> Vec<PropertyCheck> {
    use Benchmark::*;
    use CachePolicy::{EpochGuard, None as NoCache};
    use DispatchMode::{Direct, Event};

    let find = |b, m, c| results.iter().find(|r| r.is(b, m, c));
    let ratio_check = |name: &'static str,
                       faster: Option<&BenchResult>,
                       slower: Option<&BenchResult>,
                       min_ratio: f64,
                       strict: bool| {
        let (Some(f), Some(s)) = (faster, slower) else {
            return PropertyCheck { name, status: PropertyStatus::Skipped, detail: "missing measurement".into() };
        };
        let ratio = f.throughput_ops_per_ms / s.throughput_ops_per_ms;
        let holds = if strict { ratio > min_ratio } else { ratio >= min_ratio };
        let op = if strict { ">" } else { ">=" };
        let detail = format!(
            "{}/{}/{} {:.3} vs {}/{}/{} {:.3} ops/ms: ratio {ratio:.2} (need {op} {min_ratio})",
            f.benchmark, f.mode, f.cache, f.throughput_ops_per_ms, s.benchmark, s.mode, s.cache, s.throughput_ops_per_ms
        );
        PropertyCheck { name, status: if holds { PropertyStatus::Pass } else { PropertyStatus::Fail }, detail }
    };

    let mut checks = vec![
        ratio_check(
            "plain single >= 5x contextual single (EVENT, NONE)",
            find(PlainSingle, Event, NoCache),
            find(ContextualSingle, Event, NoCache),
            5.0,
            false,
        ),
        ratio_check(
            "DIRECT >= 1.2x EVENT, contextual single",
            find(ContextualSingle, Direct, NoCache),
            find(ContextualSingle, Event, NoCache),
            1.2,
            false,
        ),
        ratio_check(
            "DIRECT faster than EVENT, contextual layered10",
            find(ContextualLayered10, Direct, NoCache),
            find(ContextualLayered10, Event, NoCache),
            1.0,
            true,
        ),
        ratio_check(
            "EPOCH_GUARD >= 10x NONE, contextual single (EVENT)",
            find(ContextualSingle, Event, EpochGuard),
            find(ContextualSingle, Event, NoCache),
            10.0,
            false,
        ),
        ratio_check(
            "contextual layered10 slower than contextual single (EVENT, NONE)",
            find(ContextualSingle, Event, NoCache),
            find(ContextualLayered10, Event, NoCache),
            1.0,
            true,
        ),
    ];
    let unstable: Vec<String> = results
        .iter()
        .filter(|r| r.is_unstable())
        .map(|r| format!("{}/{}/{} {:.1}%", r.benchmark, r.mode, r.cache, r.relative_error * 100.0))
        .collect();
    checks.push(PropertyCheck {
        name: "relative error < 10% per result",
        status: if unstable.is_empty() { PropertyStatus::Pass } else { PropertyStatus::Unstable },
        detail: if unstable.is_empty() { format!("{} results", results.len()) } else { unstable.join(", ") },
    });
    checks
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub congo_version: String,
}

impl HostInfo {
    pub fn current() -> Self {
        HostInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            congo_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub host: HostInfo,
    pub results: Vec<BenchResult>,
}

impl Report {
    pub fn new(results: Vec<BenchResult>) -> Self {
        Report { host: HostInfo::current(), results }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Human-readable table: Test / Mode / Cache / Score / Error.
pub fn render_table(results: &[BenchResult]) -> String {
    let mut out = format!("{:<22} {:<7} {:<12} {:>14} {:>8}\n", "Test", "Mode", "Cache", "Score (ops/ms)", "Error");
    for r in results {
        let flag = if r.is_unstable() { "  unstable" } else { "" };
        out.push_str(&format!(
            "{:<22} {:<7} {:<12} {:>14.3} {:>7.2}%{flag}\n",
            r.benchmark,
            r.mode,
            r.cache,
            r.throughput_ops_per_ms,
            r.relative_error * 100.0
        ));
    }
    out
}
