//! Syntax tree for ConGo modules.
//!
//! Call expressions carry two fields that the parser leaves at their defaults
//! and the lowering pass fills in: a call-site id and the resolved
//! [`CallTarget`]. Both are ignored by the pretty printer.

use std::fmt;
use std::rc::Rc;

use crate::span::SourceSpan;

#[derive(Clone, Debug, PartialEq)]
pub struct Ident {
    pub name: String,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleAst {
    /// Dotted module name, e.g. `demo.hero`.
    pub name: String,
    pub name_span: SourceSpan,
    pub context_decl: Option<ContextDecl>,
    /// Function declarations in source order.
    pub decls: Vec<FunctionDecl>,
    pub span: SourceSpan,
}

/// `contexts = [A(), B()]`
#[derive(Clone, Debug, PartialEq)]
pub struct ContextDecl {
    pub ctors: Vec<Ident>,
    pub span: SourceSpan,
}

impl ContextDecl {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.iter().map(|c| c.name.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionDecl {
    pub name: String,
    pub lambda: Rc<Lambda>,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lambda {
    pub params: Vec<Ident>,
    pub layer: Option<LayerAnnotation>,
    pub body: Body,
    pub span: SourceSpan,
}

impl Lambda {
    pub fn arity(&self) -> usize {
        self.params.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Block(Block),
    /// `-> expr`
    Compact(Box<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CompositionMode {
    /// `@(...)`: the layer replaces the next variant and may call `proceed`.
    Replace,
    /// `@(...)+`: the layer runs, then the rest of the chain.
    BeforeBase,
    /// `+@(...)`: the rest of the chain runs, then the layer.
    AfterBase,
}

impl CompositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CompositionMode::Replace => "REPLACE",
            CompositionMode::BeforeBase => "BEFORE_BASE",
            CompositionMode::AfterBase => "AFTER_BASE",
        }
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub context: String,
    pub value: String,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAnnotation {
    pub constraints: Vec<Constraint>,
    pub mode: CompositionMode,
    pub span: SourceSpan,
}

impl LayerAnnotation {
    /// Constraint pairs sorted by context name.
    pub fn constraint_set(&self) -> Vec<(String, String)> {
        let mut set: Vec<(String, String)> =
            self.constraints.iter().map(|c| (c.context.clone(), c.value.clone())).collect();
        set.sort();
        set
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub stmts: Vec<Stmt>,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stmt {
    pub kind: StmtKind,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StmtKind {
    Let { name: Ident, value: Expr },
    Assign { name: Ident, value: Expr },
    Return(Option<Expr>),
    If { cond: Expr, then_block: Block, else_branch: Option<Box<Stmt>> },
    While { cond: Expr, body: Block },
    Expr(Expr),
    Block(Block),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Rem => "%",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
        }
    }

    /// Binding strength; larger binds tighter. All binary operators are
    /// left-associative.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq | BinaryOp::Ne => 3,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 4,
            BinaryOp::Add | BinaryOp::Sub => 5,
            BinaryOp::Mul | BinaryOp::Div | BinaryOp::Rem => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Not,
    Neg,
}

/// Identifies one call expression within a lowered module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId(pub u32);

/// Functions provided by the runtime rather than by user code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    DynamicObject,
    DecisionMaker,
    SetConcrete,
    CurrentMeta,
    Println,
    Print,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Builtin> {
        Some(match name {
            "DynamicObject" => Builtin::DynamicObject,
            "decisionMaker" => Builtin::DecisionMaker,
            "setConcrete" => Builtin::SetConcrete,
            "currentMeta" => Builtin::CurrentMeta,
            "println" => Builtin::Println,
            "print" => Builtin::Print,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::DynamicObject => "DynamicObject",
            Builtin::DecisionMaker => "decisionMaker",
            Builtin::SetConcrete => "setConcrete",
            Builtin::CurrentMeta => "currentMeta",
            Builtin::Println => "println",
            Builtin::Print => "print",
        }
    }
}

/// What a by-name call resolves to. The parser produces `Unresolved`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CallTarget {
    #[default]
    Unresolved,
    /// A lexically visible local variable holding a function value.
    Local,
    /// A module function without layers.
    Function,
    /// A module function with at least one layer; dispatched through the
    /// decision-maker.
    Contextual,
    Builtin(Builtin),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Call {
    pub callee: Ident,
    pub args: Vec<Expr>,
    pub site: SiteId,
    pub target: CallTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: SourceSpan,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExprKind {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    Null,
    Ident(String),
    List(Vec<Expr>),
    Binary { op: BinaryOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Unary { op: UnaryOp, operand: Box<Expr> },
    Call(Call),
    /// `receiver: name(args)`
    MethodCall { receiver: Box<Expr>, method: Ident, args: Vec<Expr>, site: SiteId },
    /// `proceed(args)`; an empty argument list forwards the original arguments.
    Proceed(Vec<Expr>),
    Lambda(Rc<Lambda>),
}

/// Calls `f` on every span in the module, in no particular order.
pub fn for_each_span_mut(module: &mut ModuleAst, f: &mut dyn FnMut(&mut SourceSpan)) {
    f(&mut module.span);
    f(&mut module.name_span);
    if let Some(decl) = &mut module.context_decl {
        f(&mut decl.span);
        for ctor in &mut decl.ctors {
            f(&mut ctor.span);
        }
    }
    for decl in &mut module.decls {
        f(&mut decl.span);
        lambda_spans(Rc::make_mut(&mut decl.lambda), f);
    }
}

fn lambda_spans(lambda: &mut Lambda, f: &mut dyn FnMut(&mut SourceSpan)) {
    f(&mut lambda.span);
    for p in &mut lambda.params {
        f(&mut p.span);
    }
    if let Some(layer) = &mut lambda.layer {
        f(&mut layer.span);
        for c in &mut layer.constraints {
            f(&mut c.span);
        }
    }
    match &mut lambda.body {
        Body::Block(block) => block_spans(block, f),
        Body::Compact(expr) => expr_spans(expr, f),
    }
}

fn block_spans(block: &mut Block, f: &mut dyn FnMut(&mut SourceSpan)) {
    f(&mut block.span);
    for stmt in &mut block.stmts {
        stmt_spans(stmt, f);
    }
}

fn stmt_spans(stmt: &mut Stmt, f: &mut dyn FnMut(&mut SourceSpan)) {
    f(&mut stmt.span);
    match &mut stmt.kind {
        StmtKind::Let { name, value } | StmtKind::Assign { name, value } => {
            f(&mut name.span);
            expr_spans(value, f);
        }
        StmtKind::Return(value) => {
            if let Some(value) = value {
                expr_spans(value, f);
            }
        }
        StmtKind::If { cond, then_block, else_branch } => {
            expr_spans(cond, f);
            block_spans(then_block, f);
            if let Some(other) = else_branch {
                stmt_spans(other, f);
            }
        }
        StmtKind::While { cond, body } => {
            expr_spans(cond, f);
            block_spans(body, f);
        }
        StmtKind::Expr(e) => expr_spans(e, f),
        StmtKind::Block(b) => block_spans(b, f),
    }
}

fn expr_spans(expr: &mut Expr, f: &mut dyn FnMut(&mut SourceSpan)) {
    f(&mut expr.span);
    match &mut expr.kind {
        ExprKind::Int(_)
        | ExprKind::Float(_)
        | ExprKind::Str(_)
        | ExprKind::Bool(_)
        | ExprKind::Null
        | ExprKind::Ident(_) => {}
        ExprKind::List(items) | ExprKind::Proceed(items) => {
            for item in items {
                expr_spans(item, f);
            }
        }
        ExprKind::Binary { lhs, rhs, .. } => {
            expr_spans(lhs, f);
            expr_spans(rhs, f);
        }
        ExprKind::Unary { operand, .. } => expr_spans(operand, f),
        ExprKind::Call(call) => {
            f(&mut call.callee.span);
            for arg in &mut call.args {
                expr_spans(arg, f);
            }
        }
        ExprKind::MethodCall { receiver, method, args, .. } => {
            expr_spans(receiver, f);
            f(&mut method.span);
            for arg in args {
                expr_spans(arg, f);
            }
        }
        ExprKind::Lambda(lambda) => lambda_spans(Rc::make_mut(lambda), f),
    }
}

impl ModuleAst {
    /// A copy with every span replaced by [`SourceSpan::dummy`], for
    /// structural comparison.
    pub fn without_spans(&self) -> ModuleAst {
        let mut copy = self.clone();
        for_each_span_mut(&mut copy, &mut |s| *s = SourceSpan::dummy());
        copy
    }

    /// Structural equality, ignoring source positions.
    pub fn structurally_eq(&self, other: &ModuleAst) -> bool {
        self.without_spans() == other.without_spans()
    }

    pub fn spans(&self) -> Vec<SourceSpan> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        for_each_span_mut(&mut copy, &mut |s| out.push(s.clone()));
        out
    }
}
