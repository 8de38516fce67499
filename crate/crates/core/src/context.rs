//! Contexts: the concrete-value store, context descriptors that turn
//! concrete values into symbolic meta values, and the per-module context
//! manager.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::syntax::token::is_identifier;

/// A raw sensed value.
#[derive(Clone, Debug, PartialEq)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    /// Parses feed-file and `--set` values: boolean, then integer, then
    /// float, falling back to a string.
    pub fn parse_literal(text: &str) -> Scalar {
        let text = text.trim();
        match text {
            "true" => return Scalar::Bool(true),
            "false" => return Scalar::Bool(false),
            _ => {}
        }
        if let Ok(v) = text.parse::<i64>() {
            return Scalar::Int(v);
        }
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Scalar::Float(v),
            _ => Scalar::Str(text.to_string()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(v) => Some(*v as f64),
            Scalar::Float(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(v) => write!(f, "{v}"),
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Float(v) => write!(f, "{v:?}"),
            Scalar::Str(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Default)]
struct StoreInner {
    entries: HashMap<String, HashMap<String, Scalar>>,
    epoch: u64,
}

/// Shared, epoch-stamped map from `(context, key)` to [`Scalar`].
///
/// Cloning yields another handle to the same store. Every write bumps the
/// epoch under the write lock, so readers holding the read lock see a
/// consistent `(entries, epoch)` pair.
#[derive(Clone, Debug, Default)]
pub struct ConcreteValueStore {
    inner: Arc<RwLock<StoreInner>>,
    epoch: Arc<AtomicU64>,
}

/// Read-only view of the store while its read lock is held.
pub struct StoreView<'a> {
    inner: &'a StoreInner,
}

impl StoreView<'_> {
    pub fn get(&self, context: &str, key: &str) -> Option<&Scalar> {
        self.inner.entries.get(context)?.get(key)
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch
    }
}

impl ConcreteValueStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a value and returns the new epoch.
    pub fn set(&self, context: &str, key: &str, value: Scalar) -> u64 {
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        inner.entries.entry(context.to_string()).or_default().insert(key.to_string(), value);
        inner.epoch += 1;
        self.epoch.store(inner.epoch, Ordering::Release);
        inner.epoch
    }

    pub fn get(&self, context: &str, key: &str) -> Option<Scalar> {
        self.read(|view| view.get(context, key).cloned())
    }

    /// Current epoch without taking the lock.
    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    pub fn read<R>(&self, f: impl FnOnce(&StoreView<'_>) -> R) -> R {
        let inner = self.inner.read().unwrap_or_else(|e| e.into_inner());
        f(&StoreView { inner: &inner })
    }
}

/// A symbolic context state such as `RAINY`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MetaValue(String);

impl MetaValue {
    /// # Panics
    ///
    /// Panics when `symbol` is not an identifier.
    pub fn new(symbol: impl Into<String>) -> MetaValue {
        let symbol = symbol.into();
        assert!(is_identifier(&symbol), "meta value `{symbol}` is not an identifier");
        MetaValue(symbol)
    }

    pub fn try_new(symbol: impl Into<String>) -> Option<MetaValue> {
        let symbol = symbol.into();
        is_identifier(&symbol).then_some(MetaValue(symbol))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub type MetaSet = BTreeSet<MetaValue>;

#[derive(Clone, Debug, Error, PartialEq)]
#[error("{0}")]
pub struct ContextFailure(pub String);

/// A named context that computes its meta values from concrete values.
/// `evaluate` must be deterministic in the store contents.
pub trait ContextDescriptor: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, store: &StoreView<'_>) -> Result<MetaSet, ContextFailure>;
}

impl fmt::Debug for dyn ContextDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContextDescriptor({})", self.name())
    }
}

fn single(symbol: &str) -> MetaSet {
    std::iter::once(MetaValue::new(symbol)).collect()
}

fn numeric(store: &StoreView<'_>, context: &str, key: &str) -> Result<Option<f64>, ContextFailure> {
    match store.get(context, key) {
        None => Ok(None),
        Some(value) => value
            .as_f64()
            .map(Some)
            .ok_or_else(|| ContextFailure(format!("`{context}.{key}` must be numeric, got `{value}`"))),
    }
}

/// `TRUE` iff `confused` is the boolean `true`, else `FALSE`.
#[derive(Debug, Default)]
pub struct ConfusedHero;

impl ContextDescriptor for ConfusedHero {
    fn name(&self) -> &str {
        "ConfusedHero"
    }

    fn evaluate(&self, store: &StoreView<'_>) -> Result<MetaSet, ContextFailure> {
        let confused = matches!(store.get("ConfusedHero", "confused"), Some(Scalar::Bool(true)));
        Ok(single(if confused { "TRUE" } else { "FALSE" }))
    }
}

/// `RAINY` iff `rainfall_mm >= 1.0`, else `CLEAR`.
#[derive(Debug, Default)]
pub struct Weather;

impl Weather {
    pub const RAIN_THRESHOLD_MM: f64 = 1.0;
}

impl ContextDescriptor for Weather {
    fn name(&self) -> &str {
        "Weather"
    }

    fn evaluate(&self, store: &StoreView<'_>) -> Result<MetaSet, ContextFailure> {
        let rain = numeric(store, "Weather", "rainfall_mm")?.unwrap_or(0.0);
        Ok(single(if rain >= Self::RAIN_THRESHOLD_MM { "RAINY" } else { "CLEAR" }))
    }
}

/// `LOW` iff `charge_pct < 20.0`, else `OK`. A missing reading counts as `OK`.
#[derive(Debug, Default)]
pub struct Battery;

impl Battery {
    pub const LOW_THRESHOLD_PCT: f64 = 20.0;
}

impl ContextDescriptor for Battery {
    fn name(&self) -> &str {
        "Battery"
    }

    fn evaluate(&self, store: &StoreView<'_>) -> Result<MetaSet, ContextFailure> {
        let low = numeric(store, "Battery", "charge_pct")?.is_some_and(|c| c < Self::LOW_THRESHOLD_PCT);
        Ok(single(if low { "LOW" } else { "OK" }))
    }
}

type Constructor = Arc<dyn Fn() -> Arc<dyn ContextDescriptor> + Send + Sync>;

/// Maps constructor names used in `contexts = [...]` to descriptors.
#[derive(Clone)]
pub struct ContextFactory {
    ctors: BTreeMap<String, Constructor>,
}

impl fmt::Debug for ContextFactory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.ctors.keys()).finish()
    }
}

impl Default for ContextFactory {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ContextFactory {
    pub fn empty() -> Self {
        ContextFactory { ctors: BTreeMap::new() }
    }

    /// `ConfusedHero`, `Weather` and `Battery`.
    pub fn builtin() -> Self {
        let mut factory = Self::empty();
        factory.register("ConfusedHero", || Arc::new(ConfusedHero));
        factory.register("Weather", || Arc::new(Weather));
        factory.register("Battery", || Arc::new(Battery));
        factory
    }

    pub fn register(
        &mut self,
        name: &str,
        ctor: impl Fn() -> Arc<dyn ContextDescriptor> + Send + Sync + 'static,
    ) {
        self.ctors.insert(name.to_string(), Arc::new(ctor));
    }

    pub fn construct(&self, name: &str) -> Option<Arc<dyn ContextDescriptor>> {
        self.ctors.get(name).map(|ctor| ctor())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("unknown context constructor `{name}()`")]
    UnknownCtor { name: String },
    #[error("context `{context}` failed to evaluate: {cause}")]
    Evaluation { context: String, cause: ContextFailure },
}

/// Meta values of a module's contexts, read at one store epoch.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MetaSnapshot {
    pub values: BTreeMap<String, MetaSet>,
    pub epoch: u64,
}

/// Tracks which contexts each module declared.
#[derive(Debug, Default)]
pub struct ContextManager {
    factory: ContextFactory,
    registry: RwLock<HashMap<String, Vec<Arc<dyn ContextDescriptor>>>>,
}

impl ContextManager {
    pub fn new(factory: ContextFactory) -> Self {
        ContextManager { factory, registry: RwLock::new(HashMap::new()) }
    }

    pub fn factory(&self) -> &ContextFactory {
        &self.factory
    }

    /// Constructs the named contexts and records them for `module`, replacing
    /// any earlier registration. Nothing is recorded on error.
    pub fn register_module_contexts(&self, module: &str, ctor_names: &[String]) -> Result<(), ContextError> {
        let descriptors = ctor_names
            .iter()
            .map(|name| self.factory.construct(name).ok_or_else(|| ContextError::UnknownCtor { name: name.clone() }))
            .collect::<Result<Vec<_>, _>>()?;
        self.registry.write().unwrap_or_else(|e| e.into_inner()).insert(module.to_string(), descriptors);
        Ok(())
    }

    /// Registered descriptors in declaration order; empty for unknown modules.
    pub fn contexts_for(&self, module: &str) -> Vec<Arc<dyn ContextDescriptor>> {
        self.registry.read().unwrap_or_else(|e| e.into_inner()).get(module).cloned().unwrap_or_default()
    }

    pub fn context(&self, module: &str, name: &str) -> Option<Arc<dyn ContextDescriptor>> {
        self.contexts_for(module).into_iter().find(|d| d.name() == name)
    }

    pub fn snapshot_meta(&self, module: &str, store: &ConcreteValueStore) -> Result<MetaSnapshot, ContextError> {
        self.snapshot_meta_filtered(module, store, None)
    }

    /// Like [`snapshot_meta`](Self::snapshot_meta), restricted to the named
    /// contexts when `only` is given.
    pub fn snapshot_meta_filtered(
        &self,
        module: &str,
        store: &ConcreteValueStore,
        only: Option<&[String]>,
    ) -> Result<MetaSnapshot, ContextError> {
        let registry = self.registry.read().unwrap_or_else(|e| e.into_inner());
        let descriptors = registry.get(module).map(Vec::as_slice).unwrap_or_default();
        store.read(|view| {
            let mut values = BTreeMap::new();
            for d in descriptors {
                if only.is_some_and(|names| !names.iter().any(|n| n == d.name())) {
                    continue;
                }
                let metas = d
                    .evaluate(view)
                    .map_err(|cause| ContextError::Evaluation { context: d.name().to_string(), cause })?;
                values.insert(d.name().to_string(), metas);
            }
            Ok(MetaSnapshot { values, epoch: view.epoch() })
        })
    }
}

/// One concrete-value assignment, `Ctx.key=value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub context: String,
    pub key: String,
    pub value: Scalar,
}

impl Assignment {
    pub fn apply(&self, store: &ConcreteValueStore) -> u64 {
        store.set(&self.context, &self.key, self.value.clone())
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct FeedError {
    pub line: usize,
    pub message: String,
}

pub fn parse_assignment(text: &str) -> Result<Assignment, String> {
    let (target, value) = text.split_once('=').ok_or_else(|| format!("expected `Ctx.key=value`, got `{text}`"))?;
    let (context, key) =
        target.trim().split_once('.').ok_or_else(|| format!("expected `Ctx.key` before `=`, got `{target}`"))?;
    if !is_identifier(context) {
        return Err(format!("`{context}` is not a context name"));
    }
    if key.is_empty() || key.chars().any(char::is_whitespace) {
        return Err(format!("`{key}` is not a valid key"));
    }
    Ok(Assignment { context: context.to_string(), key: key.to_string(), value: Scalar::parse_literal(value) })
}

/// Parses a feed file: one `Ctx.key=value` per line, `#` comments, blank
/// lines ignored.
pub fn parse_feed(text: &str) -> Result<Vec<Assignment>, FeedError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).map_err(|message| FeedError { line: idx + 1, message })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn metas(items: &[&str]) -> MetaSet {
        items.iter().map(|s| MetaValue::new(*s)).collect()
    }

    #[test]
    fn register_in_declaration_order() {
        let manager = ContextManager::default();
        manager.register_module_contexts("demo.hero", &names(&["ConfusedHero", "Weather"])).unwrap();
        let got: Vec<_> = manager.contexts_for("demo.hero").iter().map(|d| d.name().to_string()).collect();
        assert_eq!(got, ["ConfusedHero", "Weather"]);
    }

    #[test]
    fn register_empty_and_unknown() {
        let manager = ContextManager::default();
        manager.register_module_contexts("m", &[]).unwrap();
        assert!(manager.contexts_for("m").is_empty());
        assert!(manager.contexts_for("never.registered").is_empty());
        let err = manager.register_module_contexts("m", &names(&["Nonexistent"])).unwrap_err();
        assert_eq!(err, ContextError::UnknownCtor { name: "Nonexistent".into() });
    }

    #[test]
    fn reregistration_last_write_wins() {
        let manager = ContextManager::default();
        let mut oracle: HashMap<&str, Vec<String>> = HashMap::new();
        for list in [vec!["Weather"], vec!["Battery", "ConfusedHero"], vec![]] {
            let list = names(&list);
            manager.register_module_contexts("m", &list).unwrap();
            oracle.insert("m", list);
            let got: Vec<String> = manager.contexts_for("m").iter().map(|d| d.name().to_string()).collect();
            assert_eq!(&got, &oracle["m"]);
        }
    }

    #[test]
    fn builtin_rules() {
        let manager = ContextManager::default();
        manager.register_module_contexts("m", &names(&["ConfusedHero", "Weather", "Battery"])).unwrap();
        let store = ConcreteValueStore::new();
        let snap = manager.snapshot_meta("m", &store).unwrap();
        assert_eq!(snap.values["ConfusedHero"], metas(&["FALSE"]));
        assert_eq!(snap.values["Weather"], metas(&["CLEAR"]));
        assert_eq!(snap.values["Battery"], metas(&["OK"]));
        assert_eq!(snap.epoch, 0);

        store.set("Weather", "rainfall_mm", Scalar::Float(7.0));
        store.set("Battery", "charge_pct", Scalar::Int(19));
        store.set("ConfusedHero", "confused", Scalar::Bool(true));
        let snap = manager.snapshot_meta("m", &store).unwrap();
        assert_eq!(snap.values["Weather"], metas(&["RAINY"]));
        assert_eq!(snap.values["Battery"], metas(&["LOW"]));
        assert_eq!(snap.values["ConfusedHero"], metas(&["TRUE"]));
        assert_eq!(snap.epoch, 3);
    }

    #[test]
    fn thresholds_are_inclusive_and_exclusive() {
        let store = ConcreteValueStore::new();
        store.set("Weather", "rainfall_mm", Scalar::Float(1.0));
        store.set("Battery", "charge_pct", Scalar::Float(20.0));
        store.read(|v| {
            assert_eq!(Weather.evaluate(v).unwrap(), metas(&["RAINY"]));
            assert_eq!(Battery.evaluate(v).unwrap(), metas(&["OK"]));
        });
        store.set("ConfusedHero", "confused", Scalar::Str("true".into()));
        store.read(|v| assert_eq!(ConfusedHero.evaluate(v).unwrap(), metas(&["FALSE"])));
    }

    #[test]
    fn unknown_module_snapshot() {
        let manager = ContextManager::default();
        let store = ConcreteValueStore::new();
        store.set("Weather", "rainfall_mm", Scalar::Int(3));
        let snap = manager.snapshot_meta("nowhere", &store).unwrap();
        assert!(snap.values.is_empty());
        assert_eq!(snap.epoch, 1);
    }

    #[test]
    fn evaluation_error_names_context() {
        let manager = ContextManager::default();
        manager.register_module_contexts("m", &names(&["Weather"])).unwrap();
        let store = ConcreteValueStore::new();
        store.set("Weather", "rainfall_mm", Scalar::Str("lots".into()));
        match manager.snapshot_meta("m", &store).unwrap_err() {
            ContextError::Evaluation { context, .. } => assert_eq!(context, "Weather"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filtered_snapshot_narrows() {
        let manager = ContextManager::default();
        manager.register_module_contexts("m", &names(&["ConfusedHero", "Weather"])).unwrap();
        let store = ConcreteValueStore::new();
        let snap = manager.snapshot_meta_filtered("m", &store, Some(&names(&["Weather"]))).unwrap();
        assert_eq!(snap.values.keys().collect::<Vec<_>>(), ["Weather"]);
    }

    #[test]
    fn literal_parsing_order() {
        assert_eq!(Scalar::parse_literal("true"), Scalar::Bool(true));
        assert_eq!(Scalar::parse_literal("42"), Scalar::Int(42));
        assert_eq!(Scalar::parse_literal("7.0"), Scalar::Float(7.0));
        assert_eq!(Scalar::parse_literal("north"), Scalar::Str("north".into()));
        assert_eq!(Scalar::parse_literal("True"), Scalar::Str("True".into()));
    }

    #[test]
    fn feed_file() {
        let feed = "# sensors\nWeather.rainfall_mm=7.0\n\nConfusedHero.confused = true # manual\n";
        let parsed = parse_feed(feed).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].value, Scalar::Bool(true));
        assert_eq!(parse_feed("ok.x=1\nbroken").unwrap_err().line, 2);
    }

    #[test]
    fn concurrent_writers_see_strictly_increasing_epochs() {
        let store = ConcreteValueStore::new();
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let store = store.clone();
                std::thread::spawn(move || {
                    let mut seen = Vec::new();
                    for i in 0..250 {
                        seen.push(store.set("Battery", "charge_pct", Scalar::Int(t * 1000 + i)));
                    }
                    seen
                })
            })
            .collect();
        let mut all: Vec<u64> = Vec::new();
        for h in handles {
            let seen = h.join().unwrap();
            assert!(seen.windows(2).all(|w| w[0] < w[1]));
            all.extend(seen);
        }
        all.sort_unstable();
        all.dedup();
        assert_eq!(all, (1..=1000).collect::<Vec<u64>>());
        assert_eq!(store.epoch(), 1000);
    }

    fn scalar() -> impl Strategy<Value = Scalar> {
        prop_oneof![
            any::<bool>().prop_map(Scalar::Bool),
            (-50i64..50).prop_map(Scalar::Int),
            (-50.0f64..50.0).prop_map(Scalar::Float),
            "[a-z]{0,3}".prop_map(Scalar::Str),
        ]
    }

    proptest! {
        #[test]
        fn evaluation_is_deterministic(
            writes in proptest::collection::vec(
                (prop_oneof![Just("ConfusedHero"), Just("Weather"), Just("Battery")],
                 prop_oneof![Just("confused"), Just("rainfall_mm"), Just("charge_pct")],
                 scalar()),
                0..12)
        ) {
            let a = ConcreteValueStore::new();
            let b = ConcreteValueStore::new();
            for (ctx, key, value) in &writes {
                a.set(ctx, key, value.clone());
                b.set(ctx, key, value.clone());
            }
            let manager = ContextManager::default();
            manager.register_module_contexts("m", &names(&["ConfusedHero", "Weather", "Battery"])).unwrap();
            let first = manager.snapshot_meta("m", &a);
            let again = manager.snapshot_meta("m", &a);
            let other = manager.snapshot_meta("m", &b);
            prop_assert_eq!(&first, &again);
            prop_assert_eq!(first, other);
        }
    }
}
