//! In-process publish/subscribe bus with hierarchical topics.
//!
//! A single dispatcher thread delivers messages to matching subscriptions in
//! publish order; publishers never run handlers inline. Request/reply is
//! layered on top: the caller subscribes to a reply topic, publishes the
//! request and blocks until the reply arrives or the timeout elapses.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, OnceLock, RwLock, Weak};
use std::thread::{self, JoinHandle, ThreadId};
use std::time::Duration;

use thiserror::Error;

use crate::decision::{DecisionReply, InvocationRequest};

/// Trailing pattern segment that matches one or more further segments.
pub const WILDCARD: &str = "*";

/// Default bound for [`Bus::request_reply`] used by the runtime.
pub const DEFAULT_REPLY_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic `{0}` has an empty segment")]
    EmptySegment(String),
    #[error("topic `{0}` contains whitespace")]
    Whitespace(String),
    #[error("topic `{0}` uses `*` other than as its last segment")]
    MisplacedWildcard(String),
}

/// A `/`-separated topic name, or a subscription pattern ending in `*`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Topic {
    segments: Vec<String>,
}

impl Topic {
    pub fn parse(text: &str) -> Result<Topic, TopicError> {
        Self::from_segments(text.split('/').map(str::to_string).collect()).map_err(|e| match e {
            TopicError::EmptySegment(_) => TopicError::EmptySegment(text.to_string()),
            TopicError::Whitespace(_) => TopicError::Whitespace(text.to_string()),
            TopicError::MisplacedWildcard(_) => TopicError::MisplacedWildcard(text.to_string()),
        })
    }

    pub fn from_segments(segments: Vec<String>) -> Result<Topic, TopicError> {
        let render = || segments.join("/");
        if segments.is_empty() || segments.iter().any(|s| s.is_empty() || s.contains('/')) {
            return Err(TopicError::EmptySegment(render()));
        }
        if segments.iter().any(|s| s.chars().any(char::is_whitespace)) {
            return Err(TopicError::Whitespace(render()));
        }
        let last = segments.len() - 1;
        if segments.iter().enumerate().any(|(i, s)| s.contains('*') && (i != last || s != WILDCARD)) {
            return Err(TopicError::MisplacedWildcard(render()));
        }
        Ok(Topic { segments })
    }

    /// Appends one segment.
    pub fn child(&self, segment: impl Into<String>) -> Result<Topic, TopicError> {
        let mut segments = self.segments.clone();
        segments.push(segment.into());
        Self::from_segments(segments)
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn is_pattern(&self) -> bool {
        self.segments.last().is_some_and(|s| s == WILDCARD)
    }

    /// Whether this pattern matches `topic`. A trailing `*` matches any
    /// nonempty suffix; otherwise segments must be equal.
    pub fn matches(&self, topic: &Topic) -> bool {
        if self.is_pattern() {
            let prefix = &self.segments[..self.segments.len() - 1];
            topic.segments.len() > prefix.len() && topic.segments[..prefix.len()] == *prefix
        } else {
            self.segments == topic.segments
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("/"))
    }
}

impl FromStr for Topic {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::parse(s)
    }
}

/// Published after a concrete value changes.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextChanged {
    pub context: String,
    pub key: String,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub enum Payload {
    Request(Arc<InvocationRequest>),
    Reply(DecisionReply),
    ContextChanged(ContextChanged),
    User(String),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Request(_) => "InvocationRequest",
            Payload::Reply(_) => "DecisionResponse",
            Payload::ContextChanged(_) => "ContextChanged",
            Payload::User(_) => "UserEvent",
        }
    }

    pub fn request_id(&self) -> Option<u64> {
        match self {
            Payload::Request(r) => Some(r.request_id),
            Payload::Reply(r) => Some(r.request_id),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Message {
    pub topic: Topic,
    pub payload: Payload,
    /// Total order over all messages published to one bus.
    pub seq: u64,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("the bus has been shut down")]
    Closed,
    #[error("cannot publish to wildcard topic `{0}`")]
    WildcardPublish(String),
    #[error("no reply{} within {after:?}", request_id.map(|id| format!(" to request {id}")).unwrap_or_default())]
    Timeout { request_id: Option<u64>, after: Duration },
    #[error("request/reply issued from the bus dispatcher thread would deadlock")]
    Reentrant,
}

pub type TraceSink = Arc<dyn Fn(&str) + Send + Sync>;

type Handler = Box<dyn FnMut(&Message) + Send>;

struct SubEntry {
    id: u64,
    pattern: Topic,
    active: AtomicBool,
    handler: Mutex<Handler>,
}

struct PublishState {
    next_seq: u64,
    sender: Option<Sender<Message>>,
}

struct Shared {
    subs: Arc<RwLock<Vec<Arc<SubEntry>>>>,
    publish: Mutex<PublishState>,
    dispatcher: Mutex<Option<JoinHandle<()>>>,
    dispatcher_id: OnceLock<ThreadId>,
    next_sub: AtomicU64,
}

impl Shared {
    fn on_dispatcher(&self) -> bool {
        self.dispatcher_id.get() == Some(&thread::current().id())
    }

    fn remove(&self, entry: &SubEntry) {
        entry.active.store(false, Ordering::SeqCst);
        if !self.on_dispatcher() {
            // Wait out an in-flight delivery to this subscription.
            drop(entry.handler.lock().unwrap_or_else(|e| e.into_inner()));
        }
        self.subs.write().unwrap_or_else(|e| e.into_inner()).retain(|s| s.id != entry.id);
    }
}

fn deliver(subs: &RwLock<Vec<Arc<SubEntry>>>, msg: &Message) {
    let targets: Vec<Arc<SubEntry>> = subs
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .iter()
        .filter(|s| s.pattern.matches(&msg.topic))
        .cloned()
        .collect();
    for sub in targets {
        let mut handler = sub.handler.lock().unwrap_or_else(|e| e.into_inner());
        if !sub.active.load(Ordering::SeqCst) {
            continue;
        }
        if catch_unwind(AssertUnwindSafe(|| handler(msg))).is_err() {
            log::error!("handler for `{}` panicked on message {} ({})", sub.pattern, msg.seq, msg.topic);
        }
    }
}

/// Handle to a bus. Clones share the same dispatcher.
#[derive(Clone)]
pub struct Bus {
    shared: Arc<Shared>,
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus").field("closed", &self.is_closed()).finish_non_exhaustive()
    }
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new()
    }
}

/// Returned by [`Bus::subscribe`].
pub struct Subscription {
    entry: Arc<SubEntry>,
    bus: Weak<Shared>,
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Subscription({} on {})", self.entry.id, self.entry.pattern)
    }
}

impl Subscription {
    pub fn pattern(&self) -> &Topic {
        &self.entry.pattern
    }

    /// Same as [`Bus::unsubscribe`].
    pub fn cancel(&self) {
        match self.bus.upgrade() {
            Some(shared) => shared.remove(&self.entry),
            None => self.entry.active.store(false, Ordering::SeqCst),
        }
    }
}

impl Bus {
    pub fn new() -> Bus {
        Self::with_trace(None)
    }

    /// Starts a bus whose dispatcher reports every message it dispatches to
    /// `trace` as `SEQ <n> <topic> <payload-kind>`.
    pub fn with_trace(trace: Option<TraceSink>) -> Bus {
        let (tx, rx) = mpsc::channel::<Message>();
        let subs: Arc<RwLock<Vec<Arc<SubEntry>>>> = Arc::default();
        let dispatcher_subs = subs.clone();
        let handle = thread::Builder::new()
            .name("congo-bus".into())
            .spawn(move || {
                for msg in rx {
                    if let Some(trace) = &trace {
                        trace(&format!("SEQ {} {} {}", msg.seq, msg.topic, msg.payload.kind()));
                    }
                    deliver(&dispatcher_subs, &msg);
                }
            })
            .expect("failed to spawn bus dispatcher");
        let dispatcher_id = OnceLock::new();
        let _ = dispatcher_id.set(handle.thread().id());
        Bus {
            shared: Arc::new(Shared {
                subs,
                publish: Mutex::new(PublishState { next_seq: 0, sender: Some(tx) }),
                dispatcher: Mutex::new(Some(handle)),
                dispatcher_id,
                next_sub: AtomicU64::new(0),
            }),
        }
    }

    pub fn is_closed(&self) -> bool {
        self.shared.publish.lock().unwrap_or_else(|e| e.into_inner()).sender.is_none()
    }

    /// True on the dispatcher thread, i.e. inside a handler.
    pub fn on_dispatcher_thread(&self) -> bool {
        self.shared.on_dispatcher()
    }

    /// Enqueues a message and returns its sequence number.
    pub fn publish(&self, topic: Topic, payload: Payload) -> Result<u64, BusError> {
        if topic.is_pattern() {
            return Err(BusError::WildcardPublish(topic.to_string()));
        }
        let mut state = self.shared.publish.lock().unwrap_or_else(|e| e.into_inner());
        let seq = state.next_seq;
        let sender = state.sender.as_ref().ok_or(BusError::Closed)?;
        sender.send(Message { topic, payload, seq }).map_err(|_| BusError::Closed)?;
        state.next_seq += 1;
        Ok(seq)
    }

    pub fn subscribe(&self, pattern: Topic, handler: impl FnMut(&Message) + Send + 'static) -> Subscription {
        let entry = Arc::new(SubEntry {
            id: self.shared.next_sub.fetch_add(1, Ordering::Relaxed),
            pattern,
            active: AtomicBool::new(true),
            handler: Mutex::new(Box::new(handler)),
        });
        self.shared.subs.write().unwrap_or_else(|e| e.into_inner()).push(entry.clone());
        Subscription { entry, bus: Arc::downgrade(&self.shared) }
    }

    /// After this returns the handler is not invoked again.
    pub fn unsubscribe(&self, subscription: &Subscription) {
        self.shared.remove(&subscription.entry);
    }

    pub fn subscription_count(&self) -> usize {
        self.shared.subs.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// Publishes `payload` on `request_topic` and blocks until a message
    /// arrives on `reply_topic`.
    pub fn request_reply(
        &self,
        request_topic: Topic,
        payload: Payload,
        reply_topic: Topic,
        timeout: Duration,
    ) -> Result<Payload, BusError> {
        if self.on_dispatcher_thread() {
            return Err(BusError::Reentrant);
        }
        let request_id = payload.request_id();
        let (tx, rx) = mpsc::channel();
        let reply_sub = self.subscribe(reply_topic, move |msg| {
            let _ = tx.send(msg.payload.clone());
        });
        let outcome = self.publish(request_topic, payload).and_then(|_| {
            rx.recv_timeout(timeout).map_err(|e| match e {
                RecvTimeoutError::Timeout => BusError::Timeout { request_id, after: timeout },
                RecvTimeoutError::Disconnected => BusError::Closed,
            })
        });
        self.unsubscribe(&reply_sub);
        outcome
    }

    /// Stops accepting messages, drains the queue and joins the dispatcher.
    /// Subscriptions are dropped afterwards. Idempotent.
    pub fn shutdown(&self) {
        self.shared.publish.lock().unwrap_or_else(|e| e.into_inner()).sender = None;
        if self.on_dispatcher_thread() {
            return;
        }
        if let Some(handle) = self.shared.dispatcher.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = handle.join();
        }
        self.shared.subs.write().unwrap_or_else(|e| e.into_inner()).clear();
    }
}
