//! Tree-walking evaluator with contextual call sites.

mod error;
mod eval;
mod value;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

pub use error::{ErrorKind, RuntimeError};
pub use value::{ChainLink, Closure, DynObject, Env, MethodTable, ObjectRef, Scope, Value};

use crate::context::{ConcreteValueStore, ContextError, ContextFactory, ContextManager};
use crate::decision::{
    attach_decision_maker, attach_decision_maker_at, object_request_pattern, object_request_topic, reply_topic,
    request_topic, resolve_decision_maker, validate_response, DecisionConfig, DecisionError, DecisionMakerHandle,
    DecisionMakerRegistry, DecisionResponse, InvocationRequest, VariantInfo,
};
use crate::lower::{LoweredModule, VariantId};
use crate::messaging::{Bus, BusError, Payload, Subscription, Topic, TraceSink, DEFAULT_REPLY_TIMEOUT};
use crate::span::SourceSpan;
use crate::syntax::SiteId;

use eval::ProceedFrame;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DispatchMode {
    /// Requests travel over the bus and the caller blocks on the reply.
    #[default]
    Event,
    /// The decision-maker is called synchronously on the caller's thread.
    Direct,
}

impl DispatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DispatchMode::Event => "EVENT",
            DispatchMode::Direct => "DIRECT",
        }
    }
}

impl fmt::Display for DispatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum CachePolicy {
    /// Every contextual call asks the decision-maker.
    #[default]
    None,
    /// A call site reuses its last chain while the store epoch is unchanged.
    EpochGuard,
}

impl CachePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            CachePolicy::None => "NONE",
            CachePolicy::EpochGuard => "EPOCH_GUARD",
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub enum DecisionMakerChoice {
    /// Created from the registry.
    Named(String),
    Instance(DecisionMakerHandle),
}

/// Collects program output in memory.
#[derive(Clone, Debug, Default)]
pub struct OutputBuffer(Rc<RefCell<String>>);

impl OutputBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contents(&self) -> String {
        self.0.borrow().clone()
    }

    pub fn take(&self) -> String {
        std::mem::take(&mut *self.0.borrow_mut())
    }
}

#[derive(Clone, Debug, Default)]
pub enum Output {
    #[default]
    Stdout,
    Buffer(OutputBuffer),
}

impl Output {
    fn write(&self, text: &str) {
        match self {
            Output::Stdout => {
                let mut out = std::io::stdout().lock();
                let _ = out.write_all(text.as_bytes());
                let _ = out.flush();
            }
            Output::Buffer(buf) => buf.0.borrow_mut().push_str(text),
        }
    }
}

pub struct RuntimeConfig {
    pub dispatch: DispatchMode,
    pub cache: CachePolicy,
    pub decision_maker: DecisionMakerChoice,
    pub registry: DecisionMakerRegistry,
    /// Passed to the decision-maker's `init`.
    pub decision_params: BTreeMap<String, String>,
    pub context_factory: ContextFactory,
    pub store: ConcreteValueStore,
    /// EVENT mode only.
    pub reply_timeout: Duration,
    pub trace_bus: Option<TraceSink>,
    pub output: Output,
    pub max_depth: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            dispatch: DispatchMode::Event,
            cache: CachePolicy::None,
            decision_maker: DecisionMakerChoice::Named("default".to_string()),
            registry: DecisionMakerRegistry::default(),
            decision_params: BTreeMap::new(),
            context_factory: ContextFactory::builtin(),
            store: ConcreteValueStore::new(),
            reply_timeout: DEFAULT_REPLY_TIMEOUT,
            trace_bus: None,
            output: Output::Stdout,
            max_depth: 1000,
        }
    }
}

impl fmt::Debug for RuntimeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RuntimeConfig")
            .field("dispatch", &self.dispatch)
            .field("cache", &self.cache)
            .field("decision_maker", &self.decision_maker)
            .field("reply_timeout", &self.reply_timeout)
            .field("trace_bus", &self.trace_bus.is_some())
            .field("max_depth", &self.max_depth)
            .finish_non_exhaustive()
    }
}

/// A call site is keyed by its source position and, for method calls, the
/// receiver's identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SiteKey {
    pub site: SiteId,
    pub receiver: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallSiteState {
    Unbound,
    Bound { chain: Vec<VariantId>, epoch: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallSite {
    pub site_id: SiteId,
    pub module: String,
    pub function_name: String,
    pub state: CallSiteState,
    pub cache_policy: CachePolicy,
}

struct SiteEntry {
    site: CallSite,
    links: Option<Rc<[ChainLink]>>,
    /// Receiver method-table version the chain was decided against.
    version: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RuntimeStats {
    pub contextual_calls: u64,
    pub decisions: u64,
    pub cache_hits: u64,
}

pub struct Runtime {
    module: Rc<LoweredModule>,
    dispatch: DispatchMode,
    cache: CachePolicy,
    reply_timeout: Duration,
    max_depth: usize,
    depth: usize,
    store: ConcreteValueStore,
    contexts: Arc<ContextManager>,
    registry: DecisionMakerRegistry,
    dm_config: DecisionConfig,
    bus: Bus,
    global_dm: DecisionMakerHandle,
    request_topic: Topic,
    subscriptions: Vec<Subscription>,
    /// Decision-makers attached for per-object routing, by handle id.
    object_dms: HashMap<u64, Topic>,
    sites: HashMap<SiteKey, SiteEntry>,
    host_sites: HashMap<String, SiteId>,
    next_request_id: u64,
    next_object_id: u64,
    output: Output,
    stats: RuntimeStats,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("module", &self.module.name)
            .field("dispatch", &self.dispatch)
            .field("cache", &self.cache)
            .field("global_dm", &self.global_dm)
            .finish_non_exhaustive()
    }
}

impl Runtime {
    /// Registers the module's contexts, instantiates and initializes the
    /// global decision-maker and starts the bus.
    pub fn new(module: LoweredModule, config: RuntimeConfig) -> Result<Runtime, RuntimeError> {
        let contexts = Arc::new(ContextManager::new(config.context_factory));
        if let Err(e) = contexts.register_module_contexts(&module.name, &module.context_ctors) {
            let span = match &e {
                ContextError::UnknownCtor { name } => module
                    .context_ctors
                    .iter()
                    .position(|c| c == name)
                    .and_then(|i| module.context_ctor_spans.get(i))
                    .unwrap_or(&module.span),
                ContextError::Evaluation { .. } => &module.span,
            };
            return Err(RuntimeError::at(ErrorKind::UnknownContextCtor, span, e.to_string()));
        }
        let global_dm = match config.decision_maker {
            DecisionMakerChoice::Instance(dm) => dm,
            DecisionMakerChoice::Named(name) => config.registry.create(&name).ok_or_else(|| {
                RuntimeError::at(
                    ErrorKind::UnknownDecisionMaker,
                    &module.span,
                    format!("no decision-maker registered as `{name}`"),
                )
            })?,
        };
        let dm_config =
            DecisionConfig { store: config.store.clone(), contexts: contexts.clone(), params: config.decision_params };
        global_dm.init(&dm_config);

        let bus = Bus::with_trace(config.trace_bus);
        let subscriptions = vec![attach_decision_maker(&bus, global_dm.clone())];
        Ok(Runtime {
            request_topic: request_topic(&module.name),
            module: Rc::new(module),
            dispatch: config.dispatch,
            cache: config.cache,
            reply_timeout: config.reply_timeout,
            max_depth: config.max_depth,
            depth: 0,
            store: config.store,
            contexts,
            registry: config.registry,
            dm_config,
            bus,
            global_dm,
            subscriptions,
            object_dms: HashMap::new(),
            sites: HashMap::new(),
            host_sites: HashMap::new(),
            next_request_id: 1,
            next_object_id: 1,
            output: config.output,
            stats: RuntimeStats::default(),
        })
    }

    pub fn module(&self) -> &LoweredModule {
        &self.module
    }

    pub fn store(&self) -> &ConcreteValueStore {
        &self.store
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn global_decision_maker(&self) -> &DecisionMakerHandle {
        &self.global_dm
    }

    pub fn stats(&self) -> RuntimeStats {
        self.stats
    }

    pub fn call_site(&self, key: SiteKey) -> Option<&CallSite> {
        self.sites.get(&key).map(|e| &e.site)
    }

    pub fn call_sites(&self) -> impl Iterator<Item = (&SiteKey, &CallSite)> {
        self.sites.iter().map(|(k, e)| (k, &e.site))
    }

    /// Calls a module function from the host. Contextual functions are
    /// dispatched like source-level calls, through one call site per name.
    pub fn call(&mut self, name: &str, args: Vec<Value>) -> Result<Value, RuntimeError> {
        let module = self.module.clone();
        let Some(table) = module.table(name) else {
            return Err(RuntimeError::at(
                ErrorKind::UnknownFunction,
                &module.span,
                format!("no function `{name}` in module `{}`", module.name),
            ));
        };
        let span = table.variants()[0].span().clone();
        if table.is_contextual() {
            let next = SiteId(module.site_count + self.host_sites.len() as u32);
            let site = *self.host_sites.entry(name.to_string()).or_insert(next);
            self.dispatch_contextual(site, name, None, args, &span)
        } else {
            let base = table.base.as_ref().expect("non-contextual tables have a base");
            self.invoke(name, &base.body, None, None, &args, None, &span)
        }
    }

    /// Stops the bus. Called on drop.
    pub fn shutdown(&mut self) {
        self.subscriptions.clear();
        self.bus.shutdown();
    }

    fn emit(&self, text: &str) {
        self.output.write(text);
    }

    /// Resolves the decision-maker, obtains a chain for the invocation and
    /// runs it. Under the epoch guard a site's previous chain is reused while
    /// the store epoch and the receiver's method table are unchanged.
    fn dispatch_contextual(
        &mut self,
        site: SiteId,
        function: &str,
        receiver: Option<(&Value, &ObjectRef)>,
        args: Vec<Value>,
        span: &SourceSpan,
    ) -> Result<Value, RuntimeError> {
        self.stats.contextual_calls += 1;
        let (receiver_id, version) = match receiver {
            Some((_, obj)) => {
                let o = obj.borrow();
                (Some(o.id), o.version)
            }
            None => (None, 0),
        };
        let key = SiteKey { site, receiver: receiver_id };
        let receiver_value = receiver.map(|(v, _)| v.clone());

        if self.cache == CachePolicy::EpochGuard {
            if let Some(entry) = self.sites.get(&key) {
                if let (Some(links), CallSiteState::Bound { epoch, .. }) = (&entry.links, &entry.site.state) {
                    if *epoch == self.store.epoch() && entry.version == version {
                        let links = links.clone();
                        self.stats.cache_hits += 1;
                        return self.run_chain(links, receiver_value, args.into(), function, span);
                    }
                }
            }
        }

        let module = self.module.clone();
        let (candidates, only, receiver_dm): (Vec<ChainLink>, Option<Vec<String>>, Option<DecisionMakerHandle>) =
            match receiver {
                None => {
                    let table = module.table(function).expect("contextual call names a module function");
                    let links = table.variants().into_iter().map(|v| ChainLink { variant: v.clone(), env: None });
                    (links.collect(), None, None)
                }
                Some((_, obj)) => {
                    let o = obj.borrow();
                    let methods = &o.methods[function];
                    let links = methods.table.variants().into_iter().map(|v| methods.link(v)).collect();
                    (links, o.contexts_override.clone(), o.decision_maker.clone())
                }
            };

        let snapshot = self
            .contexts
            .snapshot_meta_filtered(&module.name, &self.store, only.as_deref())
            .map_err(|e| RuntimeError::at(ErrorKind::ContextEvaluation, span, e.to_string()))?;
        let request_id = self.next_request_id;
        self.next_request_id += 1;
        let epoch = snapshot.epoch;
        let request = Arc::new(InvocationRequest {
            request_id,
            module: module.name.clone(),
            function_name: function.to_string(),
            arity: candidates[0].variant.arity,
            variants: candidates
                .iter()
                .map(|l| VariantInfo {
                    id: l.variant.id.clone(),
                    constraints: l.variant.constraints.clone(),
                    mode: l.variant.mode,
                })
                .collect(),
            receiver_id,
            meta_snapshot: snapshot.values,
            snapshot_epoch: epoch,
            reply_topic: reply_topic(request_id),
        });
        let dm = resolve_decision_maker(receiver_dm.as_ref(), &self.global_dm).clone();
        self.stats.decisions += 1;
        let response = self.decide(&dm, &request, span)?;
        validate_response(&request, &response).map_err(|msg| {
            RuntimeError::at(ErrorKind::DecisionFailed, span, format!("invalid decision from `{}`: {msg}", dm.name()))
                .with_request(request_id)
        })?;

        let chain: Rc<[ChainLink]> = response
            .chain
            .iter()
            .map(|id| candidates.iter().find(|l| l.variant.id == *id).expect("validated").clone())
            .collect();
        let guard = self.cache == CachePolicy::EpochGuard;
        let state = if guard { CallSiteState::Bound { chain: response.chain, epoch } } else { CallSiteState::Unbound };
        self.sites.insert(
            key,
            SiteEntry {
                site: CallSite {
                    site_id: site,
                    module: module.name.clone(),
                    function_name: function.to_string(),
                    state,
                    cache_policy: self.cache,
                },
                links: guard.then(|| chain.clone()),
                version,
            },
        );
        self.run_chain(chain, receiver_value, args.into(), function, span)
    }

    fn decide(
        &mut self,
        dm: &DecisionMakerHandle,
        request: &Arc<InvocationRequest>,
        span: &SourceSpan,
    ) -> Result<DecisionResponse, RuntimeError> {
        let request_id = request.request_id;
        let outcome = match self.dispatch {
            DispatchMode::Direct => dm.decide(request),
            DispatchMode::Event => {
                let topic = if *dm == self.global_dm { self.request_topic.clone() } else { self.object_topic(dm) };
                let reply = self
                    .bus
                    .request_reply(topic, Payload::Request(request.clone()), request.reply_topic.clone(), self.reply_timeout)
                    .map_err(|e| {
                        let kind = match e {
                            BusError::Timeout { .. } => ErrorKind::DecisionTimeout,
                            BusError::Reentrant => ErrorKind::ReentrantDispatch,
                            BusError::Closed => ErrorKind::BusClosed,
                            BusError::WildcardPublish(_) => ErrorKind::DecisionFailed,
                        };
                        RuntimeError::at(kind, span, format!("request {request_id} for `{}`: {e}", request.function_name))
                            .with_request(request_id)
                    })?;
                match reply {
                    Payload::Reply(reply) => reply.outcome,
                    other => Err(DecisionError::Failed(format!("unexpected {} on the reply topic", other.kind()))),
                }
            }
        };
        outcome.map_err(|e| {
            let kind = match e {
                DecisionError::NoApplicableVariant { .. } => ErrorKind::NoApplicableVariant,
                DecisionError::Failed(_) => ErrorKind::DecisionFailed,
                DecisionError::Reentrant(_) => ErrorKind::ReentrantDispatch,
            };
            RuntimeError::at(kind, span, e.to_string()).with_request(request_id)
        })
    }

    /// Request topic for a per-object decision-maker, subscribing it on first
    /// use.
    fn object_topic(&mut self, dm: &DecisionMakerHandle) -> Topic {
        if let Some(topic) = self.object_dms.get(&dm.id()) {
            return topic.clone();
        }
        let sub = attach_decision_maker_at(&self.bus, object_request_pattern(dm.id()), dm.clone());
        self.subscriptions.push(sub);
        let topic = object_request_topic(dm.id(), &self.module.name);
        self.object_dms.insert(dm.id(), topic.clone());
        topic
    }

    fn run_chain(
        &mut self,
        chain: Rc<[ChainLink]>,
        receiver: Option<Value>,
        args: Rc<[Value]>,
        function: &str,
        span: &SourceSpan,
    ) -> Result<Value, RuntimeError> {
        let frame = ProceedFrame { chain, next: 0, receiver, original_args: args.clone(), function: Rc::from(function) };
        self.exec_link(&frame, &args, span)
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs `entry` in a fresh runtime and shuts it down afterwards.
pub fn run(module: LoweredModule, entry: &str, args: Vec<Value>, config: RuntimeConfig) -> Result<Value, RuntimeError> {
    let mut runtime = Runtime::new(module, config)?;
    let result = runtime.call(entry, args);
    runtime.shutdown();
    result
}
