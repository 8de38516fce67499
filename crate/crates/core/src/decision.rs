//! Decision-makers choose which variants of a contextual function run, and
//! in which order.
//!
//! A call site sends an [`InvocationRequest`] describing the candidate
//! variants and the current meta values; the decision-maker answers with a
//! [`DecisionResponse`] whose chain lists the variants to run, outermost
//! first.

use std::any::Any;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::context::{ConcreteValueStore, ContextManager, MetaSet};
use crate::lower::VariantId;
use crate::messaging::{Bus, BusError, Payload, Subscription, Topic};
use crate::syntax::CompositionMode;

/// Pattern the global decision-maker listens on.
pub const REQUEST_PATTERN: &str = "congo/decision/request/*";
pub const REQUEST_PREFIX: &str = "congo/decision/request";
pub const REPLY_PREFIX: &str = "congo/decision/reply";
/// Per-object decision-makers listen on `congo/decision/object/<dm-id>/*`.
pub const OBJECT_REQUEST_PREFIX: &str = "congo/decision/object";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantInfo {
    pub id: VariantId,
    /// Sorted by context name; empty for the base variant.
    pub constraints: Vec<(String, String)>,
    pub mode: CompositionMode,
}

impl VariantInfo {
    pub fn is_base(&self) -> bool {
        self.constraints.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvocationRequest {
    pub request_id: u64,
    pub module: String,
    pub function_name: String,
    pub arity: usize,
    /// Declaration order.
    pub variants: Vec<VariantInfo>,
    pub receiver_id: Option<u64>,
    pub meta_snapshot: BTreeMap<String, MetaSet>,
    pub snapshot_epoch: u64,
    pub reply_topic: Topic,
}

impl InvocationRequest {
    pub fn base(&self) -> Option<&VariantInfo> {
        self.variants.iter().find(|v| v.is_base())
    }

    /// Whether every constraint of `variant` holds in the meta snapshot.
    pub fn holds(&self, variant: &VariantInfo) -> bool {
        variant
            .constraints
            .iter()
            .all(|(ctx, value)| self.meta_snapshot.get(ctx).is_some_and(|set| set.iter().any(|m| m.as_str() == value)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionResponse {
    pub request_id: u64,
    /// Outermost first.
    pub chain: Vec<VariantId>,
    pub epoch: u64,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DecisionError {
    #[error("no applicable variant of `{function}` in module `{module}`")]
    NoApplicableVariant { module: String, function: String },
    #[error("decision-maker failed: {0}")]
    Failed(String),
    #[error("decision-maker re-entered the bus: {0}")]
    Reentrant(String),
}

impl From<BusError> for DecisionError {
    fn from(e: BusError) -> Self {
        match e {
            BusError::Reentrant => DecisionError::Reentrant(e.to_string()),
            other => DecisionError::Failed(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionReply {
    pub request_id: u64,
    pub outcome: Result<DecisionResponse, DecisionError>,
}

/// Handed to [`DecisionMaker::init`].
#[derive(Clone, Debug, Default)]
pub struct DecisionConfig {
    pub store: ConcreteValueStore,
    pub contexts: Arc<ContextManager>,
    pub params: BTreeMap<String, String>,
}

pub trait DecisionMaker: Send {
    fn name(&self) -> &str;

    fn init(&mut self, _config: &DecisionConfig) {}

    /// Must be total over well-formed requests.
    fn decide(&mut self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError>;

    fn train(&mut self, _feedback: &dyn Any) {}
}

/// Reference policy: every layer whose constraints all hold is eligible;
/// eligible layers run last-declared outermost, then the base.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultDecisionMaker;

impl DefaultDecisionMaker {
    pub fn chain(request: &InvocationRequest) -> Result<Vec<VariantId>, DecisionError> {
        let mut layers: Vec<&VariantInfo> =
            request.variants.iter().filter(|v| !v.is_base() && request.holds(v)).collect();
        layers.sort_by_key(|v| std::cmp::Reverse(v.id.declaration_index));
        let mut chain: Vec<VariantId> = layers.into_iter().map(|v| v.id.clone()).collect();
        if let Some(base) = request.base() {
            chain.push(base.id.clone());
        }
        if chain.is_empty() {
            return Err(DecisionError::NoApplicableVariant {
                module: request.module.clone(),
                function: request.function_name.clone(),
            });
        }
        Ok(chain)
    }
}

impl DecisionMaker for DefaultDecisionMaker {
    fn name(&self) -> &str {
        "default"
    }

    fn decide(&mut self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        Ok(DecisionResponse {
            request_id: request.request_id,
            chain: Self::chain(request)?,
            epoch: request.snapshot_epoch,
        })
    }
}

/// Ignores context: always runs the base variant alone.
#[derive(Debug, Default, Clone, Copy)]
pub struct BaseOnlyDecisionMaker;

impl DecisionMaker for BaseOnlyDecisionMaker {
    fn name(&self) -> &str {
        "base-only"
    }

    fn decide(&mut self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        let base = request.base().ok_or_else(|| DecisionError::NoApplicableVariant {
            module: request.module.clone(),
            function: request.function_name.clone(),
        })?;
        Ok(DecisionResponse { request_id: request.request_id, chain: vec![base.id.clone()], epoch: request.snapshot_epoch })
    }
}

/// Wraps another decision-maker and counts `decide` calls.
#[derive(Debug, Default)]
pub struct CountingDecisionMaker<D = DefaultDecisionMaker> {
    inner: D,
    count: Arc<AtomicUsize>,
}

impl<D: DecisionMaker> CountingDecisionMaker<D> {
    pub fn new(inner: D) -> Self {
        CountingDecisionMaker { inner, count: Arc::default() }
    }

    /// Shared counter; stays readable after the decision-maker is boxed.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        self.count.clone()
    }
}

impl<D: DecisionMaker> DecisionMaker for CountingDecisionMaker<D> {
    fn name(&self) -> &str {
        "counting"
    }

    fn init(&mut self, config: &DecisionConfig) {
        self.inner.init(config);
    }

    fn decide(&mut self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.decide(request)
    }

    fn train(&mut self, feedback: &dyn Any) {
        self.inner.train(feedback);
    }
}

static NEXT_HANDLE_ID: AtomicU64 = AtomicU64::new(1);

/// Shared, serialized access to a decision-maker instance.
#[derive(Clone)]
pub struct DecisionMakerHandle {
    id: u64,
    name: Arc<str>,
    inner: Arc<Mutex<Box<dyn DecisionMaker>>>,
}

impl fmt::Debug for DecisionMakerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DecisionMaker({}#{})", self.name, self.id)
    }
}

impl PartialEq for DecisionMakerHandle {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl DecisionMakerHandle {
    pub fn new(dm: impl DecisionMaker + 'static) -> Self {
        Self::from_box(Box::new(dm))
    }

    pub fn from_box(dm: Box<dyn DecisionMaker>) -> Self {
        DecisionMakerHandle {
            id: NEXT_HANDLE_ID.fetch_add(1, Ordering::Relaxed),
            name: Arc::from(dm.name()),
            inner: Arc::new(Mutex::new(dm)),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn init(&self, config: &DecisionConfig) {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).init(config);
    }

    pub fn train(&self, feedback: &dyn Any) {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).train(feedback);
    }

    /// Calls `decide`; a panic becomes [`DecisionError::Failed`].
    pub fn decide(&self, request: &InvocationRequest) -> Result<DecisionResponse, DecisionError> {
        let mut dm = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        catch_unwind(AssertUnwindSafe(|| dm.decide(request))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            Err(DecisionError::Failed(msg))
        })
    }
}

type DmCtor = Arc<dyn Fn() -> Box<dyn DecisionMaker> + Send + Sync>;

/// Name-indexed constructors for decision-makers.
#[derive(Clone)]
pub struct DecisionMakerRegistry {
    ctors: BTreeMap<String, DmCtor>,
}

impl fmt::Debug for DecisionMakerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.ctors.keys()).finish()
    }
}

impl Default for DecisionMakerRegistry {
    fn default() -> Self {
        let mut registry = DecisionMakerRegistry { ctors: BTreeMap::new() };
        registry.register("default", || Box::new(DefaultDecisionMaker));
        registry.register("base-only", || Box::new(BaseOnlyDecisionMaker));
        registry.register("counting", || Box::new(CountingDecisionMaker::new(DefaultDecisionMaker)));
        registry
    }
}

impl DecisionMakerRegistry {
    pub fn register(&mut self, name: &str, ctor: impl Fn() -> Box<dyn DecisionMaker> + Send + Sync + 'static) {
        self.ctors.insert(name.to_string(), Arc::new(ctor));
    }

    pub fn create(&self, name: &str) -> Option<DecisionMakerHandle> {
        self.ctors.get(name).map(|ctor| DecisionMakerHandle::from_box(ctor()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }
}

/// Checks a response against its request: nonempty chain, only requested
/// variants, and the base at most once and only in last position.
pub fn validate_response(request: &InvocationRequest, response: &DecisionResponse) -> Result<(), String> {
    if response.request_id != request.request_id {
        return Err(format!("response for request {} answered request {}", request.request_id, response.request_id));
    }
    if response.chain.is_empty() {
        return Err("empty chain".to_string());
    }
    let mut seen = HashSet::new();
    for (pos, id) in response.chain.iter().enumerate() {
        let Some(info) = request.variants.iter().find(|v| v.id == *id) else {
            return Err(format!("chain names unknown variant `{}`", id.mangled));
        };
        if !seen.insert(id) {
            return Err(format!("variant `{}` appears twice", id.mangled));
        }
        if info.is_base() && pos + 1 != response.chain.len() {
            return Err(format!("base variant `{}` is not last", id.mangled));
        }
    }
    Ok(())
}

pub fn resolve_decision_maker<'a>(
    receiver_dm: Option<&'a DecisionMakerHandle>,
    global: &'a DecisionMakerHandle,
) -> &'a DecisionMakerHandle {
    receiver_dm.unwrap_or(global)
}

/// Subscribes `dm` on `pattern`; each request is answered on its reply topic.
pub fn attach_decision_maker_at(bus: &Bus, pattern: Topic, dm: DecisionMakerHandle) -> Subscription {
    let replier = bus.clone();
    bus.subscribe(pattern, move |msg| {
        let Payload::Request(request) = &msg.payload else { return };
        let outcome = dm.decide(request);
        let reply = DecisionReply { request_id: request.request_id, outcome };
        if let Err(e) = replier.publish(request.reply_topic.clone(), Payload::Reply(reply)) {
            log::warn!("dropping reply to request {}: {e}", request.request_id);
        }
    })
}

/// Subscribes `dm` as the global decision-maker on `congo/decision/request/*`.
pub fn attach_decision_maker(bus: &Bus, dm: DecisionMakerHandle) -> Subscription {
    attach_decision_maker_at(bus, Topic::parse(REQUEST_PATTERN).expect("valid pattern"), dm)
}

pub fn request_topic(module: &str) -> Topic {
    Topic::parse(REQUEST_PREFIX).and_then(|t| t.child(module)).expect("module names are valid topic segments")
}

pub fn object_request_topic(dm_id: u64, module: &str) -> Topic {
    Topic::parse(&format!("{OBJECT_REQUEST_PREFIX}/{dm_id}"))
        .and_then(|t| t.child(module))
        .expect("module names are valid topic segments")
}

pub fn object_request_pattern(dm_id: u64) -> Topic {
    Topic::parse(&format!("{OBJECT_REQUEST_PREFIX}/{dm_id}/*")).expect("valid pattern")
}

pub fn reply_topic(request_id: u64) -> Topic {
    Topic::parse(&format!("{REPLY_PREFIX}/{request_id}")).expect("valid topic")
}
