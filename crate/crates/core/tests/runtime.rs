use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use congo_core::context::Scalar;
use congo_core::decision::{BaseOnlyDecisionMaker, CountingDecisionMaker, DecisionMaker, DecisionResponse};
use congo_core::messaging::{Bus, Payload, Topic};
use congo_core::{
    lower, parse_source, CachePolicy, DecisionError, DecisionMakerChoice, DecisionMakerHandle, DefaultDecisionMaker,
    DispatchMode, ErrorKind, InvocationRequest, Output, OutputBuffer, Runtime, RuntimeConfig, RuntimeError, Value,
};

fn runtime(src: &str, config: RuntimeConfig) -> Runtime {
    let ast = parse_source(src, "test.congo").expect("parses");
    let module = lower(&ast).expect("lowers");
    Runtime::new(module, config).expect("starts")
}

fn buffered(config: RuntimeConfig) -> (RuntimeConfig, OutputBuffer) {
    let buf = OutputBuffer::new();
    (RuntimeConfig { output: Output::Buffer(buf.clone()), ..config }, buf)
}

fn run(src: &str, config: RuntimeConfig) -> (Result<Value, RuntimeError>, String) {
    let (config, buf) = buffered(config);
    let mut rt = runtime(src, config);
    let result = rt.call("main", vec![]);
    rt.shutdown();
    (result, buf.contents())
}

fn run_ok(src: &str) -> (Value, String) {
    let (result, out) = run(src, RuntimeConfig::default());
    (result.unwrap_or_else(|e| panic!("{e}\n{:?}", e.trace)), out)
}

fn run_err(src: &str) -> RuntimeError {
    run(src, RuntimeConfig::default()).0.expect_err("expected a runtime error")
}

fn hero_source() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../demos/hero.congo")).unwrap()
}

fn with_store(assignments: &[(&str, &str, Scalar)]) -> RuntimeConfig {
    let config = RuntimeConfig::default();
    for (ctx, key, value) in assignments {
        config.store.set(ctx, key, value.clone());
    }
    config
}

#[test]
fn arithmetic_entry() {
    let (v, _) = run_ok("module m\nfunction main = || -> 41 + 1");
    assert_eq!(v, Value::Int(42));
}

#[test]
fn missing_entry_is_unknown_function() {
    let (result, _) = run("module m\nfunction f = || -> 1", RuntimeConfig::default());
    let err = result.unwrap_err();
    assert_eq!(err.kind, ErrorKind::UnknownFunction);
    assert_eq!(err.headline(), "ERROR UnknownFunctionError at test.congo:1:1");
}

#[test]
fn numeric_semantics() {
    assert_eq!(run_ok("module m\nfunction main = || -> 7 / 2").0, Value::Int(3));
    assert_eq!(run_ok("module m\nfunction main = || -> 7 / 2.0").0, Value::Float(3.5));
    assert_eq!(run_ok("module m\nfunction main = || -> 1 + 0.5").0, Value::Float(1.5));
    assert_eq!(run_ok("module m\nfunction main = || -> -7 % 3").0, Value::Int(-1));
    assert_eq!(run_err("module m\nfunction main = || -> 1 / 0").kind, ErrorKind::DivisionByZero);
    assert_eq!(run_err("module m\nfunction main = || -> 9223372036854775807 + 1").kind, ErrorKind::IntegerOverflow);
    assert_eq!(run_err("module m\nfunction main = || -> 1 + true").kind, ErrorKind::Type);
}

#[test]
fn control_flow_and_closures() {
    let src = r#"module m
function fib = |n| { if n < 2 { return n } return fib(n - 1) + fib(n - 2) }
function counter = || {
  let n = 0
  return || { n = n + 1
    return n }
}
function main = || {
  let c = counter()
  c()
  c()
  let i = 0
  let acc = []
  while i < 3 { acc = acc + [i]
    i = i + 1 }
  println(fib(15), c(), acc, "s" + 1.0)
  return null
}
"#;
    let (v, out) = run_ok(src);
    assert_eq!(v, Value::Null);
    assert_eq!(out, "610 3 [0, 1, 2] s1.0\n");
}

#[test]
fn runtime_errors_carry_span_and_trace() {
    let err = run_err("module m\nfunction f = |x| -> x / 0\nfunction main = || -> f(1)");
    assert_eq!(err.kind, ErrorKind::DivisionByZero);
    assert_eq!(err.span.as_ref().unwrap().line, 2);
    assert_eq!(err.trace.len(), 2);
    assert!(err.trace[0].starts_with("at f "), "{:?}", err.trace);
    assert!(err.trace[1].starts_with("at main "), "{:?}", err.trace);
}

#[test]
fn hero_confused_runs_layers() {
    let (config, buf) = buffered(with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    let mut rt = runtime(&hero_source(), config);
    rt.call("main", vec![]).unwrap();
    assert_eq!(
        buf.contents(),
        "confused about north\nmove south\nbatman at south\n\
         getPos layer\ngetPos base\ngetPos returned base\n\
         move north\nrobin at north\n"
    );
}

#[test]
fn hero_not_confused_runs_base_only() {
    let (config, buf) = buffered(with_store(&[("ConfusedHero", "confused", Scalar::Bool(false))]));
    let mut rt = runtime(&hero_source(), config);
    rt.call("main", vec![]).unwrap();
    assert_eq!(
        buf.contents(),
        "move north\nbatman at north\ngetPos base\ngetPos returned base\nmove north\nrobin at north\n"
    );
}

#[test]
fn hero_confused_and_rainy_stacks_three_variants() {
    let (config, buf) = buffered(with_store(&[
        ("ConfusedHero", "confused", Scalar::Bool(true)),
        ("Weather", "rainfall_mm", Scalar::Float(4.5)),
    ]));
    let mut rt = runtime(&hero_source(), config);
    rt.call("main", vec![]).unwrap();
    let out = buf.contents();
    assert!(out.starts_with("confused about north\nmove south\nshake off the rain after south\n"), "{out}");
}

#[test]
fn before_base_value_is_discarded() {
    let src = r#"module m
contexts = [ConfusedHero()]
function getPos = || { println("base")
  return "base" }
function getPos = ||@(ConfusedHero=TRUE)+ { println("layer")
  return "layer" }
function main = || -> getPos()
"#;
    let (result, out) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    assert_eq!(result.unwrap(), Value::str("base"));
    assert_eq!(out, "layer\nbase\n");
}

#[test]
fn after_base_returns_base_value() {
    let src = r#"module m
contexts = [ConfusedHero()]
function f = |x| { println("base")
  return x }
function f = |x|+@(ConfusedHero=TRUE) { println("after")
  return 99 }
function main = || -> f(5)
"#;
    let (result, out) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    assert_eq!(result.unwrap(), Value::Int(5));
    assert_eq!(out, "base\nafter\n");
}

#[test]
fn replace_layer_composes_with_proceed() {
    let src = r#"module m
contexts = [ConfusedHero()]
function f = |dir| -> 10
function f = |dir|@(ConfusedHero=TRUE) -> proceed(dir) + 1
function main = || -> f(3)
"#;
    let (result, _) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    assert_eq!(result.unwrap(), Value::Int(11));
    let (result, _) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(false))]));
    assert_eq!(result.unwrap(), Value::Int(10));
}

#[test]
fn proceed_forwards_or_replaces_arguments() {
    let src = r#"module m
contexts = [ConfusedHero()]
function f = |x| -> x
function f = |x|@(ConfusedHero=TRUE) -> [proceed(), proceed(x + 100)]
function main = || -> f(1)
"#;
    let (result, _) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    assert_eq!(result.unwrap(), Value::list(vec![Value::Int(1), Value::Int(101)]));
}

#[test]
fn proceed_past_the_end_is_an_error() {
    let src = r#"module m
contexts = [ConfusedHero()]
function f = ||@(ConfusedHero=TRUE) -> proceed()
function main = || -> f()
"#;
    let (result, _) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    let err = result.unwrap_err();
    assert_eq!(err.kind, ErrorKind::ProceedExhausted);
    assert_eq!(err.span.unwrap().line, 3);
}

#[test]
fn layers_without_base_and_no_eligible_layer() {
    let src = r#"module m
contexts = [ConfusedHero()]
function f = ||@(ConfusedHero=TRUE) -> 1
function main = || -> f()
"#;
    let err = run(src, RuntimeConfig::default()).0.unwrap_err();
    assert_eq!(err.kind, ErrorKind::NoApplicableVariant);
    assert!(err.message.contains("`f`") && err.message.contains("`m`"), "{}", err.message);
    assert!(err.request_id.is_some());
}

#[test]
fn concrete_values_drive_meta_values() {
    let src = r#"module m
contexts = [Weather()]
function main = || {
  let before = currentMeta("Weather")
  setConcrete("Weather", "rainfall_mm", 7.0)
  return [before, currentMeta(Weather)]
}
"#;
    let (v, _) = run_ok(src);
    assert_eq!(
        v,
        Value::list(vec![Value::list(vec![Value::str("CLEAR")]), Value::list(vec![Value::str("RAINY")])])
    );
    assert_eq!(run_err("module m\nfunction main = || -> currentMeta(\"Weather\")").kind, ErrorKind::UnknownContext);
}

#[test]
fn context_evaluation_failure_names_context() {
    let src = r#"module m
contexts = [Weather()]
function f = || -> 1
function f = ||@(Weather=RAINY) -> 2
function main = || -> f()
"#;
    let (result, _) = run(src, with_store(&[("Weather", "rainfall_mm", Scalar::Str("lots".into()))]));
    let err = result.unwrap_err();
    assert_eq!(err.kind, ErrorKind::ContextEvaluation);
    assert!(err.message.contains("Weather"), "{}", err.message);
}

#[test]
fn unknown_context_ctor_fails_at_startup() {
    let ast = parse_source("module m\ncontexts = [Nonexistent()]", "x.congo").unwrap();
    let err = Runtime::new(lower(&ast).unwrap(), RuntimeConfig::default()).unwrap_err();
    assert_eq!(err.kind, ErrorKind::UnknownContextCtor);
    assert!(err.message.contains("Nonexistent"));
    assert_eq!(err.headline(), "ERROR UnknownContextCtorError at x.congo:2:13");
}

#[test]
fn object_definitions() {
    let src = r#"module m
contexts = [ConfusedHero()]
function main = || {
  let o = DynamicObject(): define("name", "o"): define("greet", |this, who| -> "hi " + who + " from " + this: name())
  o: name("p")
  return o: greet("you")
}
"#;
    assert_eq!(run_ok(src).0, Value::str("hi you from p"));

    let dup = r#"module m
contexts = [ConfusedHero()]
function main = || -> DynamicObject(): define("f", |this|@(ConfusedHero=TRUE) -> 1): define("f", |this|@(ConfusedHero=TRUE) -> 2)
"#;
    assert_eq!(run_err(dup).kind, ErrorKind::Redefinition);
    let base = "module m\nfunction main = || -> DynamicObject(): define(\"f\", |this| -> 1): define(\"f\", |this| -> 2)";
    assert_eq!(run_err(base).kind, ErrorKind::Redefinition);
    let arity = "module m\ncontexts = [ConfusedHero()]\nfunction main = || -> DynamicObject(): define(\"f\", |this| -> 1): define(\"f\", |this, x|@(ConfusedHero=TRUE) -> 2)";
    assert_eq!(run_err(arity).kind, ErrorKind::ArityMismatch);
    let missing = "module m\nfunction main = || -> DynamicObject(): nope()";
    assert_eq!(run_err(missing).kind, ErrorKind::UnknownMethod);
    let ctx = "module m\ncontexts = [Weather()]\nfunction main = || -> DynamicObject(): contexts([\"ConfusedHero\"])";
    assert_eq!(run_err(ctx).kind, ErrorKind::UnknownContext);
}

#[test]
fn contexts_override_narrows_snapshot() {
    let src = r#"module m
contexts = [ConfusedHero(), Weather()]
function main = || {
  let o = DynamicObject():
    contexts([Weather]):
    define("f", |this| -> "base"):
    define("f", |this|@(ConfusedHero=TRUE) -> "confused")
  return o: f()
}
"#;
    let (result, _) = run(src, with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]));
    assert_eq!(result.unwrap(), Value::str("base"));
}

#[test]
fn per_object_decision_maker_overrides_global() {
    let src = r#"module m
contexts = [ConfusedHero()]
function make = || -> DynamicObject():
  define("f", |this| -> "base"):
  define("f", |this|@(ConfusedHero=TRUE) -> "layer")
function main = || {
  let plain = make()
  let custom = make(): decisionmaker(decisionMaker("base-only"))
  return [plain: f(), custom: f()]
}
"#;
    for dispatch in [DispatchMode::Event, DispatchMode::Direct] {
        let mut config = with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]);
        config.dispatch = dispatch;
        let (result, _) = run(src, config);
        assert_eq!(result.unwrap(), Value::list(vec![Value::str("layer"), Value::str("base")]), "{dispatch}");
    }
}

fn counting_config(cache: CachePolicy) -> (RuntimeConfig, Arc<std::sync::atomic::AtomicUsize>) {
    let dm = CountingDecisionMaker::new(DefaultDecisionMaker);
    let counter = dm.counter();
    let config = RuntimeConfig {
        cache,
        decision_maker: DecisionMakerChoice::Instance(DecisionMakerHandle::new(dm)),
        ..RuntimeConfig::default()
    };
    (config, counter)
}

const FLIPPING: &str = r#"module m
contexts = [ConfusedHero()]
function f = |i| -> "base " + i
function f = |i|@(ConfusedHero=TRUE) -> "layer " + proceed()
function main = || {
  let i = 0
  while i < 100 {
    if i % 25 == 0 { setConcrete("ConfusedHero", "confused", i % 50 == 0) }
    println(f(i))
    i = i + 1
  }
}
"#;

#[test]
fn policy_none_redecides_every_call() {
    let (config, counter) = counting_config(CachePolicy::None);
    let (result, out) = run(FLIPPING, config);
    result.unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), 100);
    assert!(out.starts_with("layer base 0\n"));
}

#[test]
fn epoch_guard_decides_once_per_epoch_with_identical_output() {
    let (config, counter) = counting_config(CachePolicy::None);
    let (_, expected) = run(FLIPPING, config);
    let (config, counter_guard) = counting_config(CachePolicy::EpochGuard);
    let (result, out) = run(FLIPPING, config);
    result.unwrap();
    assert_eq!(counter.load(Ordering::SeqCst), 100);
    assert_eq!(counter_guard.load(Ordering::SeqCst), 4);
    assert_eq!(out, expected);
}

#[test]
fn epoch_guard_rebinds_after_method_redefinition() {
    let src = r#"module m
contexts = [ConfusedHero()]
function main = || {
  let o = DynamicObject(): define("f", |this| -> "base")
  let seen = []
  let i = 0
  while i < 2 {
    seen = seen + [o: f()]
    if i == 0 { o: define("f", |this|@(ConfusedHero=TRUE) -> "layer") }
    i = i + 1
  }
  return seen
}
"#;
    let mut config = with_store(&[("ConfusedHero", "confused", Scalar::Bool(true))]);
    config.cache = CachePolicy::EpochGuard;
    let (result, _) = run(src, config);
    assert_eq!(result.unwrap(), Value::list(vec![Value::str("base"), Value::str("layer")]));
}

#[test]
fn call_site_state_follows_policy() {
    let src = "module m\ncontexts = [ConfusedHero()]\nfunction f = || -> 1\nfunction f = ||@(ConfusedHero=TRUE) -> 2\nfunction main = || -> f()";
    for (cache, bound) in [(CachePolicy::None, false), (CachePolicy::EpochGuard, true)] {
        let mut rt = runtime(src, RuntimeConfig { cache, ..RuntimeConfig::default() });
        rt.call("main", vec![]).unwrap();
        let sites: Vec<_> = rt.call_sites().map(|(_, s)| s.clone()).collect();
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].function_name, "f");
        assert_eq!(matches!(sites[0].state, congo_core::CallSiteState::Bound { .. }), bound);
    }
}

#[test]
fn non_contextual_calls_never_touch_the_bus() {
    let lines = Arc::new(Mutex::new(Vec::<String>::new()));
    let sink = lines.clone();
    let config = RuntimeConfig {
        trace_bus: Some(Arc::new(move |line: &str| sink.lock().unwrap().push(line.to_string()))),
        ..RuntimeConfig::default()
    };
    let src = "module m\ncontexts = [ConfusedHero()]\nfunction g = |x| -> x * 2\nfunction f = || -> 1\nfunction f = ||@(ConfusedHero=TRUE) -> 2\nfunction main = || -> [g(1), g(2), f()]";
    let (config, _) = buffered(config);
    let mut rt = runtime(src, config);
    rt.call("main", vec![]).unwrap();
    rt.shutdown();
    let lines = lines.lock().unwrap();
    assert_eq!(lines.len(), 2, "{lines:?}");
    assert!(lines[0].ends_with("congo/decision/request/m InvocationRequest"), "{lines:?}");
    assert!(lines[1].ends_with("congo/decision/reply/1 DecisionResponse"), "{lines:?}");
    assert_eq!(rt.stats().decisions, 1);
}

#[test]
fn set_concrete_publishes_context_changed() {
    let src = "module m\ncontexts = [Weather()]\nfunction main = || -> setConcrete(\"Weather\", \"rainfall_mm\", 2)";
    let mut rt = runtime(src, RuntimeConfig::default());
    let (tx, rx) = std::sync::mpsc::channel();
    let _sub = rt.bus().subscribe(Topic::parse("congo/context/changed/*").unwrap(), move |msg| {
        if let Payload::ContextChanged(ev) = &msg.payload {
            let _ = tx.send((msg.topic.to_string(), ev.key.clone(), ev.epoch));
        }
    });
    rt.call("main", vec![]).unwrap();
    let (topic, key, epoch) = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(topic, "congo/context/changed/Weather");
    assert_eq!(key, "rainfall_mm");
    assert_eq!(epoch, rt.store().epoch());
}

struct PanickingDm;

impl DecisionMaker for PanickingDm {
    fn name(&self) -> &str {
        "panicking"
    }

    fn decide(&mut self, _request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        panic!("boom")
    }
}

struct SlowDm(Duration);

impl DecisionMaker for SlowDm {
    fn name(&self) -> &str {
        "slow"
    }

    fn decide(&mut self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        std::thread::sleep(self.0);
        BaseOnlyDecisionMaker.decide(request)
    }
}

/// Issues a request/reply from inside `decide`, which runs on the bus
/// dispatcher in EVENT mode.
struct ReentrantDm(Arc<Mutex<Option<Bus>>>);

impl DecisionMaker for ReentrantDm {
    fn name(&self) -> &str {
        "reentrant"
    }

    fn decide(&mut self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        let bus = self.0.lock().unwrap().clone().expect("bus installed");
        let topic = Topic::parse("congo/decision/request/other").unwrap();
        bus.request_reply(topic, Payload::User(String::new()), request.reply_topic.clone(), Duration::from_secs(1))?;
        DefaultDecisionMaker.decide(request)
    }
}

const CONTEXTUAL_MAIN: &str =
    "module m\ncontexts = [ConfusedHero()]\nfunction f = || -> 1\nfunction f = ||@(ConfusedHero=TRUE) -> 2\nfunction main = || -> f()";

#[test]
fn panicking_decision_maker_surfaces_as_decision_failed() {
    for dispatch in [DispatchMode::Event, DispatchMode::Direct] {
        let config = RuntimeConfig {
            dispatch,
            decision_maker: DecisionMakerChoice::Instance(DecisionMakerHandle::new(PanickingDm)),
            ..RuntimeConfig::default()
        };
        let mut rt = runtime(CONTEXTUAL_MAIN, config);
        assert_eq!(rt.call("main", vec![]).unwrap_err().kind, ErrorKind::DecisionFailed);
        // The bus survives the failure.
        assert!(!rt.bus().is_closed());
        assert_eq!(rt.call("main", vec![]).unwrap_err().kind, ErrorKind::DecisionFailed);
    }
}

#[test]
fn slow_decision_maker_times_out_in_event_mode_only() {
    let config = RuntimeConfig {
        reply_timeout: Duration::from_millis(50),
        decision_maker: DecisionMakerChoice::Instance(DecisionMakerHandle::new(SlowDm(Duration::from_millis(300)))),
        ..RuntimeConfig::default()
    };
    let mut rt = runtime(CONTEXTUAL_MAIN, config);
    let err = rt.call("main", vec![]).unwrap_err();
    assert_eq!(err.kind, ErrorKind::DecisionTimeout);
    assert_eq!(err.request_id, Some(1));

    let config = RuntimeConfig {
        dispatch: DispatchMode::Direct,
        reply_timeout: Duration::from_millis(50),
        decision_maker: DecisionMakerChoice::Instance(DecisionMakerHandle::new(SlowDm(Duration::from_millis(100)))),
        ..RuntimeConfig::default()
    };
    let mut rt = runtime(CONTEXTUAL_MAIN, config);
    assert_eq!(rt.call("main", vec![]).unwrap(), Value::Int(1));
}

#[test]
fn reentrant_decision_maker_is_detected() {
    let slot = Arc::new(Mutex::new(None));
    let config = RuntimeConfig {
        decision_maker: DecisionMakerChoice::Instance(DecisionMakerHandle::new(ReentrantDm(slot.clone()))),
        ..RuntimeConfig::default()
    };
    let mut rt = runtime(CONTEXTUAL_MAIN, config);
    *slot.lock().unwrap() = Some(rt.bus().clone());
    let err = rt.call("main", vec![]).unwrap_err();
    assert_eq!(err.kind, ErrorKind::ReentrantDispatch);
}

#[test]
fn unknown_decision_maker_names() {
    let config = RuntimeConfig { decision_maker: DecisionMakerChoice::Named("nope".into()), ..RuntimeConfig::default() };
    let ast = parse_source(CONTEXTUAL_MAIN, "t.congo").unwrap();
    assert_eq!(Runtime::new(lower(&ast).unwrap(), config).unwrap_err().kind, ErrorKind::UnknownDecisionMaker);
    let src = "module m\nfunction main = || -> decisionMaker(\"nope\")";
    assert_eq!(run_err(src).kind, ErrorKind::UnknownDecisionMaker);
}

#[test]
fn event_and_direct_agree_on_demos() {
    let store = [
        ("ConfusedHero", "confused", Scalar::Bool(true)),
        ("Weather", "rainfall_mm", Scalar::Float(2.0)),
    ];
    let weather = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../demos/weather.congo")).unwrap();
    for src in [hero_source(), weather] {
        let mut outputs = Vec::new();
        for dispatch in [DispatchMode::Event, DispatchMode::Direct] {
            for cache in [CachePolicy::None, CachePolicy::EpochGuard] {
                let config = RuntimeConfig { dispatch, cache, ..with_store(&store) };
                let (result, out) = run(&src, config);
                result.unwrap();
                outputs.push(out);
            }
        }
        assert!(outputs.windows(2).all(|w| w[0] == w[1]), "{outputs:#?}");
    }
}

#[test]
fn weather_demo_output() {
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../demos/weather.congo")).unwrap();
    let (result, out) = run(&src, RuntimeConfig::default());
    result.unwrap();
    assert_eq!(
        out,
        "walk at 8\nmeta [RAINY] [OK]\ntake the bus at 9\nmeta [RAINY] [LOW]\n(charge your phone)\ntake the bus at 10\nmeta [RAINY] [LOW]\n"
    );
}
