//! Recursive-descent parser producing a [`ModuleAst`].
//!
//! ```text
//! module          := "module" dotted_name decl* ;
//! decl            := context_decl | function_decl ;
//! context_decl    := "contexts" "=" "[" ctor ("," ctor)* "]" ;
//! ctor            := identifier "(" ")" ;
//! function_decl   := "function" identifier "=" lambda ;
//! lambda          := "|" params? "|" annotation_suffix? (("->" expression) | block) ;
//! annotation_suffix := "+@(" constraints ")"
//!                    | "@(" constraints ")" "+"
//!                    | "@(" constraints ")" ;
//! constraints     := identifier "=" identifier ("," identifier "=" identifier)* ;
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::rc::Rc;

use thiserror::Error;

use super::ast::*;
use super::token::{LexError, Token, TokenKind};
use crate::span::SourceSpan;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("{0}")]
    Lex(#[from] LexError),
    #[error("{span}: expected {}, found {found}", expected.join(" or "))]
    Syntax { span: SourceSpan, expected: Vec<String>, found: String },
    #[error("{span}: function `{name}` already has a base (unannotated) declaration at {first}")]
    DuplicateBase { span: SourceSpan, name: String, first: SourceSpan },
    #[error("{span}: function `{name}` already has a layer with constraints {constraints}")]
    DuplicateLayer { span: SourceSpan, name: String, constraints: String },
    #[error("{span}: duplicate parameter `{name}`")]
    DuplicateParam { span: SourceSpan, name: String },
    #[error("{span}: context `{context}` constrained twice in one annotation")]
    DuplicateConstraint { span: SourceSpan, context: String },
    #[error("{span}: a module declares its contexts at most once")]
    DuplicateContextDecl { span: SourceSpan },
}

impl ParseError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::Lex(_) => "LexError",
            ParseError::Syntax { .. } => "ParseError",
            ParseError::DuplicateBase { .. } => "DuplicateBaseError",
            ParseError::DuplicateLayer { .. } => "DuplicateLayerError",
            ParseError::DuplicateParam { .. } => "DuplicateParamError",
            ParseError::DuplicateConstraint { .. } => "DuplicateConstraintError",
            ParseError::DuplicateContextDecl { .. } => "DuplicateContextDeclError",
        }
    }

    pub fn span(&self) -> &SourceSpan {
        match self {
            ParseError::Lex(e) => &e.span,
            ParseError::Syntax { span, .. }
            | ParseError::DuplicateBase { span, .. }
            | ParseError::DuplicateLayer { span, .. }
            | ParseError::DuplicateParam { span, .. }
            | ParseError::DuplicateConstraint { span, .. }
            | ParseError::DuplicateContextDecl { span } => span,
        }
    }
}

type PResult<T> = Result<T, ParseError>;

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &TokenKind {
        &self.tokens[self.pos].kind
    }

    fn peek_at(&self, offset: usize) -> &TokenKind {
        let idx = (self.pos + offset).min(self.tokens.len() - 1);
        &self.tokens[idx].kind
    }

    fn span(&self) -> SourceSpan {
        self.tokens[self.pos].span.clone()
    }

    fn advance(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        tok
    }

    fn at(&self, kind: &TokenKind) -> bool {
        self.peek() == kind
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.at(kind) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn unexpected<T>(&self, expected: &[&str]) -> PResult<T> {
        Err(ParseError::Syntax {
            span: self.span(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.peek().describe(),
        })
    }

    fn expect(&mut self, kind: TokenKind) -> PResult<Token> {
        if self.at(&kind) {
            Ok(self.advance())
        } else {
            self.unexpected(&[&kind.describe()])
        }
    }

    fn ident(&mut self) -> PResult<Ident> {
        match self.peek().clone() {
            TokenKind::Ident(name) => {
                let span = self.advance().span;
                Ok(Ident { name, span })
            }
            _ => self.unexpected(&["identifier"]),
        }
    }

    fn module(&mut self) -> PResult<ModuleAst> {
        let span = self.span();
        self.expect(TokenKind::Module)?;
        let first = self.ident()?;
        let name_span = first.span.clone();
        let mut name = first.name;
        while self.eat(&TokenKind::Dot) {
            name.push('.');
            name.push_str(&self.ident()?.name);
        }
        let mut context_decl = None;
        let mut decls = Vec::new();
        loop {
            match self.peek() {
                TokenKind::Eof => break,
                TokenKind::Function => decls.push(self.function_decl()?),
                TokenKind::Ident(word) if word == "contexts" => {
                    let decl = self.context_decl()?;
                    if context_decl.is_some() {
                        return Err(ParseError::DuplicateContextDecl { span: decl.span });
                    }
                    context_decl = Some(decl);
                }
                _ => return self.unexpected(&["`function`", "`contexts`", "end of file"]),
            }
        }
        let module = ModuleAst { name, name_span, context_decl, decls, span };
        check_declarations(&module)?;
        Ok(module)
    }

    fn context_decl(&mut self) -> PResult<ContextDecl> {
        let span = self.span();
        self.advance();
        self.expect(TokenKind::Assign)?;
        self.expect(TokenKind::LBracket)?;
        let mut ctors = Vec::new();
        loop {
            let ctor = self.ident()?;
            self.expect(TokenKind::LParen)?;
            self.expect(TokenKind::RParen)?;
            ctors.push(ctor);
            if !self.eat(&TokenKind::Comma) {
                break;
            }
        }
        self.expect(TokenKind::RBracket)?;
        Ok(ContextDecl { ctors, span })
    }

    fn function_decl(&mut self) -> PResult<FunctionDecl> {
        let span = self.span();
        self.expect(TokenKind::Function)?;
        let name = self.ident()?;
        self.expect(TokenKind::Assign)?;
        if !matches!(self.peek(), TokenKind::Pipe | TokenKind::OrOr) {
            return self.unexpected(&["`|`"]);
        }
        let lambda = self.lambda()?;
        Ok(FunctionDecl { name: name.name, lambda: Rc::new(lambda), span })
    }

    fn lambda(&mut self) -> PResult<Lambda> {
        let span = self.span();
        let mut params: Vec<Ident> = Vec::new();
        if !self.eat(&TokenKind::OrOr) {
            self.expect(TokenKind::Pipe)?;
            if !self.at(&TokenKind::Pipe) {
                loop {
                    let param = self.ident()?;
                    if params.iter().any(|p| p.name == param.name) {
                        return Err(ParseError::DuplicateParam { span: param.span, name: param.name });
                    }
                    params.push(param);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
            }
            self.expect(TokenKind::Pipe)?;
        }
        let layer = self.annotation()?;
        let body = match self.peek() {
            TokenKind::Arrow => {
                self.advance();
                Body::Compact(Box::new(self.expr()?))
            }
            TokenKind::LBrace => Body::Block(self.block()?),
            _ => return self.unexpected(&["`->`", "`{`", "`@(`", "`+@(`"]),
        };
        Ok(Lambda { params, layer, body, span })
    }

    fn annotation(&mut self) -> PResult<Option<LayerAnnotation>> {
        let span = self.span();
        let after = match self.peek() {
            TokenKind::AnnotOpen => false,
            TokenKind::AnnotOpenAfter => true,
            _ => return Ok(None),
        };
        self.advance();
        let mut constraints: Vec<Constraint> = Vec::new();
        loop {
            let context = self.ident()?;
            self.expect(TokenKind::Assign)?;
            let value = self.ident()?;
            if constraints.iter().any(|c| c.context == context.name) {
                return Err(ParseError::DuplicateConstraint { span: context.span, context: context.name });
            }
            constraints.push(Constraint { context: context.name, value: value.name, span: context.span });
            if !self.eat(&TokenKind::Comma) {
                break;
            }
        }
        let mode = match (self.peek(), after) {
            (TokenKind::AnnotClose, false) => CompositionMode::Replace,
            (TokenKind::AnnotClosePlus, false) => CompositionMode::BeforeBase,
            (TokenKind::AnnotClose, true) => CompositionMode::AfterBase,
            (TokenKind::AnnotClosePlus, true) => {
                // `+@(...)+` would be both before and after.
                return Err(ParseError::Syntax {
                    span: self.span(),
                    expected: vec!["`)`".to_string()],
                    found: "`)+`".to_string(),
                });
            }
            _ => return self.unexpected(&["`,`", "`)`"]),
        };
        self.advance();
        Ok(Some(LayerAnnotation { constraints, mode, span }))
    }

    fn block(&mut self) -> PResult<Block> {
        let span = self.span();
        self.expect(TokenKind::LBrace)?;
        let mut stmts = Vec::new();
        while !self.at(&TokenKind::RBrace) {
            if self.at(&TokenKind::Eof) {
                return self.unexpected(&["`}`"]);
            }
            stmts.push(self.stmt()?);
        }
        self.advance();
        Ok(Block { stmts, span })
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        let span = self.span();
        let kind = match self.peek() {
            TokenKind::Let => {
                self.advance();
                let name = self.ident()?;
                self.expect(TokenKind::Assign)?;
                StmtKind::Let { name, value: self.expr()? }
            }
            TokenKind::Return => {
                self.advance();
                if matches!(self.peek(), TokenKind::RBrace | TokenKind::Eof) {
                    StmtKind::Return(None)
                } else {
                    StmtKind::Return(Some(self.expr()?))
                }
            }
            TokenKind::If => return self.if_stmt(),
            TokenKind::While => {
                self.advance();
                let cond = self.expr()?;
                StmtKind::While { cond, body: self.block()? }
            }
            TokenKind::LBrace => StmtKind::Block(self.block()?),
            TokenKind::Ident(_) if self.peek_at(1) == &TokenKind::Assign => {
                let name = self.ident()?;
                self.advance();
                StmtKind::Assign { name, value: self.expr()? }
            }
            _ => StmtKind::Expr(self.expr()?),
        };
        Ok(Stmt { kind, span })
    }

    fn if_stmt(&mut self) -> PResult<Stmt> {
        let span = self.span();
        self.expect(TokenKind::If)?;
        let cond = self.expr()?;
        let then_block = self.block()?;
        let else_branch = if self.eat(&TokenKind::Else) {
            if self.at(&TokenKind::If) {
                Some(Box::new(self.if_stmt()?))
            } else {
                let block_span = self.span();
                let block = self.block()?;
                Some(Box::new(Stmt { kind: StmtKind::Block(block), span: block_span }))
            }
        } else {
            None
        };
        Ok(Stmt { kind: StmtKind::If { cond, then_block, else_branch }, span })
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.binary(1)
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        Some(match self.peek() {
            TokenKind::OrOr => BinaryOp::Or,
            TokenKind::AndAnd => BinaryOp::And,
            TokenKind::EqEq => BinaryOp::Eq,
            TokenKind::NotEq => BinaryOp::Ne,
            TokenKind::Lt => BinaryOp::Lt,
            TokenKind::Le => BinaryOp::Le,
            TokenKind::Gt => BinaryOp::Gt,
            TokenKind::Ge => BinaryOp::Ge,
            TokenKind::Plus => BinaryOp::Add,
            TokenKind::Minus => BinaryOp::Sub,
            TokenKind::Star => BinaryOp::Mul,
            TokenKind::Slash => BinaryOp::Div,
            TokenKind::Percent => BinaryOp::Rem,
            _ => return None,
        })
    }

    fn binary(&mut self, min_prec: u8) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op().filter(|op| op.precedence() >= min_prec) {
            self.advance();
            let rhs = self.binary(op.precedence() + 1)?;
            let span = lhs.span.clone();
            lhs = Expr { kind: ExprKind::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }, span };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        let span = self.span();
        let op = match self.peek() {
            TokenKind::Not => UnaryOp::Not,
            TokenKind::Minus => UnaryOp::Neg,
            _ => return self.postfix(),
        };
        self.advance();
        let operand = self.unary()?;
        Ok(Expr { kind: ExprKind::Unary { op, operand: Box::new(operand) }, span })
    }

    fn postfix(&mut self) -> PResult<Expr> {
        let mut expr = self.primary()?;
        while self.at(&TokenKind::Colon) {
            self.advance();
            let method = self.ident()?;
            let args = self.args()?;
            let span = expr.span.clone();
            expr = Expr {
                kind: ExprKind::MethodCall { receiver: Box::new(expr), method, args, site: SiteId::default() },
                span,
            };
        }
        Ok(expr)
    }

    fn args(&mut self) -> PResult<Vec<Expr>> {
        self.expect(TokenKind::LParen)?;
        let mut args = Vec::new();
        if !self.at(&TokenKind::RParen) {
            loop {
                args.push(self.expr()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        self.expect(TokenKind::RParen)?;
        Ok(args)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let span = self.span();
        let kind = match self.peek().clone() {
            TokenKind::Int(v) => {
                self.advance();
                ExprKind::Int(v)
            }
            TokenKind::Float(v) => {
                self.advance();
                ExprKind::Float(v)
            }
            TokenKind::Str(s) => {
                self.advance();
                ExprKind::Str(s)
            }
            TokenKind::True => {
                self.advance();
                ExprKind::Bool(true)
            }
            TokenKind::False => {
                self.advance();
                ExprKind::Bool(false)
            }
            TokenKind::Null => {
                self.advance();
                ExprKind::Null
            }
            TokenKind::Ident(_) => {
                let callee = self.ident()?;
                if self.at(&TokenKind::LParen) {
                    let args = self.args()?;
                    ExprKind::Call(Call { callee, args, site: SiteId::default(), target: CallTarget::Unresolved })
                } else {
                    ExprKind::Ident(callee.name)
                }
            }
            TokenKind::Proceed => {
                self.advance();
                ExprKind::Proceed(self.args()?)
            }
            TokenKind::LParen => {
                self.advance();
                let inner = self.expr()?;
                self.expect(TokenKind::RParen)?;
                return Ok(inner);
            }
            TokenKind::LBracket => {
                self.advance();
                let mut items = Vec::new();
                if !self.at(&TokenKind::RBracket) {
                    loop {
                        items.push(self.expr()?);
                        if !self.eat(&TokenKind::Comma) {
                            break;
                        }
                    }
                }
                self.expect(TokenKind::RBracket)?;
                ExprKind::List(items)
            }
            TokenKind::Pipe | TokenKind::OrOr => ExprKind::Lambda(Rc::new(self.lambda()?)),
            _ => return self.unexpected(&["expression"]),
        };
        Ok(Expr { kind, span })
    }
}

/// Same-name declarations: at most one base, and distinct constraint sets
/// among the layers.
fn check_declarations(module: &ModuleAst) -> PResult<()> {
    let mut bases: HashMap<&str, &SourceSpan> = HashMap::new();
    let mut layers: HashSet<(&str, BTreeSet<(String, String)>)> = HashSet::new();
    for decl in &module.decls {
        match &decl.lambda.layer {
            None => {
                if let Some(first) = bases.insert(&decl.name, &decl.span) {
                    return Err(ParseError::DuplicateBase {
                        span: decl.span.clone(),
                        name: decl.name.clone(),
                        first: first.clone(),
                    });
                }
            }
            Some(layer) => {
                let set: BTreeSet<(String, String)> = layer.constraint_set().into_iter().collect();
                let rendered =
                    set.iter().map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join(",");
                if !layers.insert((&decl.name, set)) {
                    return Err(ParseError::DuplicateLayer {
                        span: decl.span.clone(),
                        name: decl.name.clone(),
                        constraints: rendered,
                    });
                }
            }
        }
    }
    Ok(())
}

pub fn parse(tokens: Vec<Token>) -> PResult<ModuleAst> {
    assert!(matches!(tokens.last(), Some(Token { kind: TokenKind::Eof, .. })), "token stream must end with Eof");
    Parser { tokens, pos: 0 }.module()
}
