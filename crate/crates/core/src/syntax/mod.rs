//! Lexing, parsing and printing of ConGo source.

pub mod ast;
pub mod parser;
pub mod pretty;
pub mod token;

pub use ast::*;
pub use parser::{parse, ParseError};
pub use pretty::pretty;
pub use token::{tokenize, LexError, Token, TokenKind};

/// Tokenizes and parses `source` in one step.
pub fn parse_source(source: &str, file: &str) -> Result<ModuleAst, ParseError> {
    parse(tokenize(source, file)?)
}
