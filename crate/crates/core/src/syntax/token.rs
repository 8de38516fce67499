//! Lexer for ConGo source text.
//!
//! Newlines are insignificant; `#` starts a comment that runs to the end of
//! the line. The lexer is mildly context sensitive around layer annotations:
//! `@(` and `+@(` open an annotation, and the `)` that closes it is emitted as
//! [`TokenKind::AnnotClose`], or [`TokenKind::AnnotClosePlus`] when a `+`
//! follows immediately.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::span::SourceSpan;

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),

    Module,
    Function,
    Let,
    Return,
    If,
    Else,
    While,
    True,
    False,
    Null,
    Not,
    Proceed,

    Assign,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    AndAnd,
    OrOr,
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Dot,
    Pipe,
    Arrow,

    /// `@(` opening a REPLACE or BEFORE_BASE annotation.
    AnnotOpen,
    /// `+@(` opening an AFTER_BASE annotation.
    AnnotOpenAfter,
    /// `)` closing an annotation.
    AnnotClose,
    /// `)+` closing a BEFORE_BASE annotation.
    AnnotClosePlus,

    Eof,
}

impl TokenKind {
    /// Short human-readable description, used in expected-token sets.
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Ident(name) => format!("identifier `{name}`"),
            TokenKind::Int(v) => format!("integer `{v}`"),
            TokenKind::Float(v) => format!("float `{v:?}`"),
            TokenKind::Str(_) => "string literal".to_string(),
            TokenKind::Eof => "end of file".to_string(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            TokenKind::Module => "module",
            TokenKind::Function => "function",
            TokenKind::Let => "let",
            TokenKind::Return => "return",
            TokenKind::If => "if",
            TokenKind::Else => "else",
            TokenKind::While => "while",
            TokenKind::True => "true",
            TokenKind::False => "false",
            TokenKind::Null => "null",
            TokenKind::Not => "not",
            TokenKind::Proceed => "proceed",
            TokenKind::Assign => "=",
            TokenKind::EqEq => "==",
            TokenKind::NotEq => "!=",
            TokenKind::Lt => "<",
            TokenKind::Le => "<=",
            TokenKind::Gt => ">",
            TokenKind::Ge => ">=",
            TokenKind::Plus => "+",
            TokenKind::Minus => "-",
            TokenKind::Star => "*",
            TokenKind::Slash => "/",
            TokenKind::Percent => "%",
            TokenKind::AndAnd => "&&",
            TokenKind::OrOr => "||",
            TokenKind::LParen => "(",
            TokenKind::RParen => ")",
            TokenKind::LBracket => "[",
            TokenKind::RBracket => "]",
            TokenKind::LBrace => "{",
            TokenKind::RBrace => "}",
            TokenKind::Comma => ",",
            TokenKind::Colon => ":",
            TokenKind::Dot => ".",
            TokenKind::Pipe => "|",
            TokenKind::Arrow => "->",
            TokenKind::AnnotOpen => "@(",
            TokenKind::AnnotOpenAfter => "+@(",
            TokenKind::AnnotClose => ")",
            TokenKind::AnnotClosePlus => ")+",
            TokenKind::Ident(_)
            | TokenKind::Int(_)
            | TokenKind::Float(_)
            | TokenKind::Str(_)
            | TokenKind::Eof => "",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("{span}: {message}")]
pub struct LexError {
    pub span: SourceSpan,
    pub message: String,
}

pub fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

pub fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// True when `s` follows the identifier lexical rule.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_ident_start(c)) && chars.all(is_ident_continue)
}

fn keyword(word: &str) -> Option<TokenKind> {
    Some(match word {
        "module" => TokenKind::Module,
        "function" => TokenKind::Function,
        "let" => TokenKind::Let,
        "return" => TokenKind::Return,
        "if" => TokenKind::If,
        "else" => TokenKind::Else,
        "while" => TokenKind::While,
        "true" => TokenKind::True,
        "false" => TokenKind::False,
        "null" => TokenKind::Null,
        "not" => TokenKind::Not,
        "proceed" => TokenKind::Proceed,
        _ => return None,
    })
}

/// True for reserved words, which cannot be used as identifiers.
pub fn is_keyword(word: &str) -> bool {
    keyword(word).is_some()
}

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: u32,
    column: u32,
    file: Arc<str>,
    in_annotation: bool,
    tokens: Vec<Token>,
    _source: &'a str,
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn span(&self) -> SourceSpan {
        SourceSpan::new(self.file.clone(), self.line, self.column)
    }

    fn error(&self, span: SourceSpan, message: impl Into<String>) -> LexError {
        LexError { span, message: message.into() }
    }

    fn push(&mut self, kind: TokenKind, span: SourceSpan) {
        self.tokens.push(Token { kind, span });
    }

    fn run(mut self) -> Result<Vec<Token>, LexError> {
        while let Some(c) = self.peek() {
            let start = self.span();
            match c {
                ' ' | '\t' | '\r' | '\n' => {
                    self.bump();
                }
                '#' => {
                    while let Some(c) = self.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                '"' => self.string(start)?,
                c if c.is_ascii_digit() => self.number(start)?,
                c if is_ident_start(c) => {
                    let mut word = String::new();
                    while let Some(c) = self.peek().filter(|c| is_ident_continue(*c)) {
                        word.push(c);
                        self.bump();
                    }
                    let kind = keyword(&word).unwrap_or(TokenKind::Ident(word));
                    self.push(kind, start);
                }
                _ => self.symbol(c, start)?,
            }
        }
        if self.in_annotation {
            return Err(self.error(self.span(), "unterminated layer annotation"));
        }
        let end = self.span();
        self.push(TokenKind::Eof, end);
        Ok(self.tokens)
    }

    fn symbol(&mut self, c: char, start: SourceSpan) -> Result<(), LexError> {
        let next = self.peek_at(1);
        let (kind, width) = match (c, next) {
            ('@', Some('(')) => {
                self.in_annotation = true;
                (TokenKind::AnnotOpen, 2)
            }
            ('+', Some('@')) if self.peek_at(2) == Some('(') => {
                self.in_annotation = true;
                (TokenKind::AnnotOpenAfter, 3)
            }
            (')', _) if self.in_annotation => {
                self.in_annotation = false;
                if next == Some('+') {
                    (TokenKind::AnnotClosePlus, 2)
                } else {
                    (TokenKind::AnnotClose, 1)
                }
            }
            ('=', Some('=')) => (TokenKind::EqEq, 2),
            ('!', Some('=')) => (TokenKind::NotEq, 2),
            ('<', Some('=')) => (TokenKind::Le, 2),
            ('>', Some('=')) => (TokenKind::Ge, 2),
            ('&', Some('&')) => (TokenKind::AndAnd, 2),
            ('|', Some('|')) => (TokenKind::OrOr, 2),
            ('-', Some('>')) => (TokenKind::Arrow, 2),
            ('=', _) => (TokenKind::Assign, 1),
            ('<', _) => (TokenKind::Lt, 1),
            ('>', _) => (TokenKind::Gt, 1),
            ('+', _) => (TokenKind::Plus, 1),
            ('-', _) => (TokenKind::Minus, 1),
            ('*', _) => (TokenKind::Star, 1),
            ('/', _) => (TokenKind::Slash, 1),
            ('%', _) => (TokenKind::Percent, 1),
            ('(', _) => (TokenKind::LParen, 1),
            (')', _) => (TokenKind::RParen, 1),
            ('[', _) => (TokenKind::LBracket, 1),
            (']', _) => (TokenKind::RBracket, 1),
            ('{', _) => (TokenKind::LBrace, 1),
            ('}', _) => (TokenKind::RBrace, 1),
            (',', _) => (TokenKind::Comma, 1),
            (':', _) => (TokenKind::Colon, 1),
            ('.', _) => (TokenKind::Dot, 1),
            ('|', _) => (TokenKind::Pipe, 1),
            _ => return Err(self.error(start, format!("illegal character {c:?}"))),
        };
        for _ in 0..width {
            self.bump();
        }
        self.push(kind, start);
        Ok(())
    }

    fn string(&mut self, start: SourceSpan) -> Result<(), LexError> {
        self.bump();
        let mut text = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => return Err(self.error(start, "unterminated string literal")),
                Some('"') => break,
                Some('\\') => {
                    let escape_span = self.span();
                    let escaped = match self.bump() {
                        Some('n') => '\n',
                        Some('t') => '\t',
                        Some('r') => '\r',
                        Some('"') => '"',
                        Some('\\') => '\\',
                        None => return Err(self.error(start, "unterminated string literal")),
                        Some(other) => {
                            return Err(self.error(escape_span, format!("unknown escape \\{other}")))
                        }
                    };
                    text.push(escaped);
                }
                Some(c) => text.push(c),
            }
        }
        self.push(TokenKind::Str(text), start);
        Ok(())
    }

    fn number(&mut self, start: SourceSpan) -> Result<(), LexError> {
        let mut text = String::new();
        let mut is_float = false;
        while let Some(c) = self.peek().filter(char::is_ascii_digit) {
            text.push(c);
            self.bump();
        }
        if self.peek() == Some('.') && self.peek_at(1).is_some_and(|c| c.is_ascii_digit()) {
            is_float = true;
            text.push('.');
            self.bump();
            while let Some(c) = self.peek().filter(char::is_ascii_digit) {
                text.push(c);
                self.bump();
            }
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let sign = matches!(self.peek_at(1), Some('+' | '-'));
            let digit_at = if sign { 2 } else { 1 };
            if self.peek_at(digit_at).is_some_and(|c| c.is_ascii_digit()) {
                is_float = true;
                text.push('e');
                self.bump();
                if sign {
                    text.push(self.bump().unwrap_or('+'));
                }
                while let Some(c) = self.peek().filter(char::is_ascii_digit) {
                    text.push(c);
                    self.bump();
                }
            }
        }
        if self.peek().is_some_and(is_ident_start) {
            return Err(self.error(self.span(), "identifier immediately after numeric literal"));
        }
        let kind = if is_float {
            let value: f64 = text
                .parse()
                .map_err(|_| self.error(start.clone(), format!("malformed float literal `{text}`")))?;
            if !value.is_finite() {
                return Err(self.error(start, format!("float literal `{text}` out of range")));
            }
            TokenKind::Float(value)
        } else {
            let value: i64 = text
                .parse()
                .map_err(|_| self.error(start.clone(), format!("integer literal `{text}` out of range")))?;
            TokenKind::Int(value)
        };
        self.push(kind, start);
        Ok(())
    }
}

/// Splits `source` into tokens. The returned list always ends with
/// [`TokenKind::Eof`].
pub fn tokenize(source: &str, file: &str) -> Result<Vec<Token>, LexError> {
    Lexer {
        chars: source.chars().collect(),
        pos: 0,
        line: 1,
        column: 1,
        file: Arc::from(file),
        in_annotation: false,
        tokens: Vec::new(),
        _source: source,
    }
    .run()
}
