//! ConGo: a context-oriented language whose contextual call sites ask a
//! pluggable decision-maker, over a pub/sub bus, which layers to run.

pub mod context;
pub mod decision;
pub mod lower;
pub mod messaging;
pub mod runtime;
pub mod span;
pub mod syntax;

pub use context::{
    ConcreteValueStore, ContextDescriptor, ContextError, ContextFactory, ContextFailure, ContextManager, MetaSet,
    MetaSnapshot, MetaValue, Scalar,
};
pub use decision::{
    DecisionConfig, DecisionError, DecisionMaker, DecisionMakerHandle, DecisionMakerRegistry, DecisionReply,
    DecisionResponse, DefaultDecisionMaker, InvocationRequest, VariantInfo,
};
pub use lower::{lower, mangle, LowerError, LoweredModule, Variant, VariantId, VariantTable};
pub use messaging::{Bus, BusError, Message, Payload, Subscription, Topic};
pub use runtime::{
    run, CachePolicy, CallSite, CallSiteState, DecisionMakerChoice, DispatchMode, ErrorKind, Output, OutputBuffer,
    Runtime, RuntimeConfig, RuntimeError, RuntimeStats, SiteKey, Value,
};
pub use span::SourceSpan;
pub use syntax::{parse_source, CompositionMode, ModuleAst, ParseError};

/// Any error raised while loading or running a program.
#[derive(Debug, thiserror::Error)]
pub enum CongoError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl CongoError {
    pub fn kind(&self) -> &'static str {
        match self {
            CongoError::Parse(e) => e.kind(),
            CongoError::Lower(e) => e.kind(),
            CongoError::Runtime(e) => e.kind.name(),
        }
    }

    pub fn span(&self) -> Option<&SourceSpan> {
        match self {
            CongoError::Parse(e) => Some(e.span()),
            CongoError::Lower(e) => Some(e.span()),
            CongoError::Runtime(e) => e.span.as_ref(),
        }
    }

    /// `ERROR <kind> at <file>:<line>:<col>`.
    pub fn headline(&self) -> String {
        match self.span() {
            Some(span) => format!("ERROR {} at {}", self.kind(), span),
            None => format!("ERROR {}", self.kind()),
        }
    }
}

/// Parses and lowers one source file.
pub fn load(source: &str, file: &str) -> Result<LoweredModule, CongoError> {
    Ok(lower(&parse_source(source, file)?)?)
}
