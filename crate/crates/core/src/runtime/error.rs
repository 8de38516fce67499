use std::fmt;

use crate::span::SourceSpan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    UnknownFunction,
    UnknownMethod,
    ArityMismatch,
    Type,
    DivisionByZero,
    IntegerOverflow,
    UndefinedVariable,
    ProceedExhausted,
    DecisionTimeout,
    DecisionFailed,
    NoApplicableVariant,
    ReentrantDispatch,
    Redefinition,
    UnknownContext,
    UnknownContextCtor,
    ContextEvaluation,
    UnknownDecisionMaker,
    BusClosed,
    StackOverflow,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::UnknownFunction => "UnknownFunctionError",
            ErrorKind::UnknownMethod => "UnknownMethodError",
            ErrorKind::ArityMismatch => "ArityMismatchError",
            ErrorKind::Type => "TypeError",
            ErrorKind::DivisionByZero => "DivisionByZeroError",
            ErrorKind::IntegerOverflow => "IntegerOverflowError",
            ErrorKind::UndefinedVariable => "UndefinedVariableError",
            ErrorKind::ProceedExhausted => "ProceedExhaustedError",
            ErrorKind::DecisionTimeout => "DecisionTimeoutError",
            ErrorKind::DecisionFailed => "DecisionFailedError",
            ErrorKind::NoApplicableVariant => "NoApplicableVariantError",
            ErrorKind::ReentrantDispatch => "ReentrantDispatchError",
            ErrorKind::Redefinition => "RedefinitionError",
            ErrorKind::UnknownContext => "UnknownContextError",
            ErrorKind::UnknownContextCtor => "UnknownContextCtorError",
            ErrorKind::ContextEvaluation => "ContextEvaluationError",
            ErrorKind::UnknownDecisionMaker => "UnknownDecisionMakerError",
            ErrorKind::BusClosed => "BusClosedError",
            ErrorKind::StackOverflow => "StackOverflowError",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An error raised while running a program, with the innermost source
/// position and the call stack unwound so far (innermost first).
#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeError {
    pub kind: ErrorKind,
    pub message: String,
    pub span: Option<SourceSpan>,
    pub trace: Vec<String>,
    /// Set for decision errors raised by a specific request.
    pub request_id: Option<u64>,
}

impl RuntimeError {
    pub fn new(kind: ErrorKind, message: impl Into<String>, span: Option<&SourceSpan>) -> Self {
        RuntimeError { kind, message: message.into(), span: span.cloned(), trace: Vec::new(), request_id: None }
    }

    pub fn at(kind: ErrorKind, span: &SourceSpan, message: impl Into<String>) -> Self {
        Self::new(kind, message, Some(span))
    }

    pub fn with_request(mut self, request_id: u64) -> Self {
        self.request_id = Some(request_id);
        self
    }

    /// `ERROR <kind> at <file>:<line>:<col>`, or `ERROR <kind>` without a span.
    pub fn headline(&self) -> String {
        match &self.span {
            Some(span) => format!("ERROR {} at {}", self.kind, span),
            None => format!("ERROR {}", self.kind),
        }
    }
}

impl fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.headline(), self.message)
    }
}

impl std::error::Error for RuntimeError {}
