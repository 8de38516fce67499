use std::fmt;
use std::sync::Arc;

/// A position in a source file. Lines and columns are 1-based; columns count
/// Unicode scalar values, not bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SourceSpan {
    pub file: Arc<str>,
    pub line: u32,
    pub column: u32,
}

impl SourceSpan {
    pub fn new(file: Arc<str>, line: u32, column: u32) -> Self {
        debug_assert!(line >= 1 && column >= 1);
        SourceSpan { file, line, column }
    }

    /// Placeholder span used when comparing trees structurally.
    pub fn dummy() -> Self {
        SourceSpan { file: Arc::from(""), line: 1, column: 1 }
    }
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file, self.line, self.column)
    }
}
