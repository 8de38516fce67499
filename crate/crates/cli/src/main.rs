use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use congo_bench::{check_properties, default_plan, render_table, run_plan, BenchConfig, Benchmark, PropertyStatus, Report};
use congo_core::context::{parse_assignment, parse_feed, Assignment, Scalar};
use congo_core::{
    load, CachePolicy, CongoError, DecisionMakerChoice, DecisionMakerRegistry, DispatchMode, RuntimeConfig, Value,
};

/// Interpreter stack for deeply recursive programs.
const STACK_BYTES: usize = 256 * 1024 * 1024;

#[derive(Parser, Debug)]
#[command(name = "congo", version, about = "Run ConGo programs and dispatch benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a program.
    Run(RunArgs),
    /// Print the lowered variant tables of a program.
    EmitIr {
        file: PathBuf,
    },
    /// Measure dispatch overhead and check the expected throughput orderings.
    Bench(BenchArgs),
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    file: PathBuf,
    /// Function to call.
    #[arg(long, default_value = "main")]
    entry: String,
    /// Argument passed to the entry function (repeatable).
    #[arg(long = "arg", value_name = "VALUE")]
    args: Vec<String>,
    #[arg(long, value_enum, default_value_t = Mode::Event)]
    dispatch: Mode,
    #[arg(long, value_enum, default_value_t = Cache::None)]
    cache: Cache,
    /// Global decision-maker, by registered name.
    #[arg(long, value_name = "NAME", default_value = "default")]
    decision_maker: String,
    /// Concrete value set before the program starts (repeatable).
    #[arg(long = "set", value_name = "Ctx.key=value", value_parser = parse_assignment)]
    sets: Vec<Assignment>,
    /// File of `Ctx.key=value` lines applied before the program starts.
    #[arg(long, value_name = "FILE")]
    feed: Option<PathBuf>,
    /// Log every bus message to stderr.
    #[arg(long)]
    trace_bus: bool,
    /// Print the lowered variant tables before running.
    #[arg(long)]
    emit_ir: bool,
    /// Decision timeout in EVENT mode.
    #[arg(long, value_name = "MS", default_value_t = 5000)]
    timeout_ms: u64,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    /// Write results as JSON to this file.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Measure only this dispatch mode (default: the full plan).
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Measure only this cache policy (default: the full plan).
    #[arg(long, value_enum)]
    cache: Option<Cache>,
    /// Benchmarks to run when --mode or --cache is given (repeatable).
    #[arg(long = "benchmark", value_name = "NAME")]
    benchmarks: Vec<Benchmark>,
    #[arg(long, default_value_t = 5)]
    warmup: u32,
    #[arg(long, default_value_t = 10)]
    iterations: u32,
    #[arg(long, value_name = "MS", default_value_t = 1000)]
    iter_ms: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Event,
    Direct,
}

impl From<Mode> for DispatchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Event => DispatchMode::Event,
            Mode::Direct => DispatchMode::Direct,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cache {
    None,
    Guard,
}

impl From<Cache> for CachePolicy {
    fn from(c: Cache) -> Self {
        match c {
            Cache::None => CachePolicy::None,
            Cache::Guard => CachePolicy::EpochGuard,
        }
    }
}

fn read_source(path: &Path) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("ERROR IoError: cannot read {}: {e}", path.display());
        ExitCode::from(1)
    })
}

fn report(err: &CongoError) -> ExitCode {
    eprintln!("{}", err.headline());
    eprintln!("  {err}");
    if let CongoError::Runtime(e) = err {
        for frame in &e.trace {
            eprintln!("  {frame}");
        }
    }
    ExitCode::from(1)
}

fn scalar_value(text: &str) -> Value {
    match Scalar::parse_literal(text) {
        Scalar::Bool(b) => Value::Bool(b),
        Scalar::Int(i) => Value::Int(i),
        Scalar::Float(x) => Value::Float(x),
        Scalar::Str(s) => Value::str(&s),
    }
}

fn run(args: RunArgs) -> ExitCode {
    let source = match read_source(&args.file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let file = args.file.display().to_string();
    let module = match load(&source, &file) {
        Ok(m) => m,
        Err(e) => return report(&e),
    };
    if args.emit_ir {
        print!("{}", module.emit_ir());
    }

    let config = RuntimeConfig {
        dispatch: args.dispatch.into(),
        cache: args.cache.into(),
        decision_maker: DecisionMakerChoice::Named(args.decision_maker),
        reply_timeout: Duration::from_millis(args.timeout_ms),
        trace_bus: args.trace_bus.then(|| Arc::new(|line: &str| eprintln!("{line}")) as _),
        ..RuntimeConfig::default()
    };
    if let Some(feed) = &args.feed {
        let text = match read_source(feed) {
            Ok(t) => t,
            Err(code) => return code,
        };
        match parse_feed(&text) {
            Ok(assignments) => assignments.iter().for_each(|a| {
                a.apply(&config.store);
            }),
            Err(e) => {
                eprintln!("ERROR FeedError at {}:{}:1", feed.display(), e.line);
                eprintln!("  {e}");
                return ExitCode::from(1);
            }
        }
    }
    for assignment in &args.sets {
        assignment.apply(&config.store);
    }

    let values = args.args.iter().map(|a| scalar_value(a)).collect();
    match congo_core::run(module, &args.entry, values, config) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(e) => report(&CongoError::Runtime(e)),
    }
}

fn emit_ir(file: &Path) -> ExitCode {
    let source = match read_source(file) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match load(&source, &file.display().to_string()) {
        Ok(module) => {
            print!("{}", module.emit_ir());
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

fn bench(args: BenchArgs) -> ExitCode {
    let base = BenchConfig {
        warmup_iters: args.warmup,
        measure_iters: args.iterations,
        iter_duration: Duration::from_millis(args.iter_ms),
        ..BenchConfig::default()
    };
    if let Err(e) = base.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let plan = if args.mode.is_some() || args.cache.is_some() {
        let benchmarks = if args.benchmarks.is_empty() { Benchmark::ALL.to_vec() } else { args.benchmarks };
        vec![(
            args.mode.map_or(DispatchMode::Event, Into::into),
            args.cache.map_or(CachePolicy::None, Into::into),
            benchmarks,
        )]
    } else {
        default_plan()
    };
    let results = match run_plan(&base, &plan, |r| {
        eprintln!("{} {}/{}: {:.3} ops/ms", r.benchmark, r.mode, r.cache, r.throughput_ops_per_ms)
    }) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("ERROR BenchHarnessError: {e}");
            return ExitCode::from(1);
        }
    };
    print!("{}", render_table(&results));
    println!();
    let checks = check_properties(&results);
    for check in &checks {
        println!("{:<8} {} ({})", check.status.as_str(), check.name, check.detail);
    }
    if let Some(path) = &args.json {
        if let Err(e) = std::fs::write(path, Report::new(results).to_json() + "\n") {
            eprintln!("ERROR IoError: cannot write {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    if checks.iter().any(|c| c.status == PropertyStatus::Fail) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            if DecisionMakerRegistry::default().create(&args.decision_maker).is_none() {
                let names: Vec<_> = DecisionMakerRegistry::default().names().map(str::to_string).collect();
                eprintln!(
                    "error: unknown decision-maker `{}` (registered: {})",
                    args.decision_maker,
                    names.join(", ")
                );
                return ExitCode::from(2);
            }
            // Deep recursion in the evaluator needs more than the default stack.
            let worker = std::thread::Builder::new().stack_size(STACK_BYTES).spawn(move || run(args));
            worker.ok().and_then(|h| h.join().ok()).unwrap_or_else(|| {
                eprintln!("ERROR InternalError: interpreter thread failed");
                ExitCode::from(1)
            })
        }
        Command::EmitIr { file } => emit_ir(&file),
        Command::Bench(args) => bench(args),
    }
}
