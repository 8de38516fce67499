//! Lowering from the syntax tree to per-name variant tables.
//!
//! Layered declarations get mangled names, same-name declarations are grouped
//! into a [`VariantTable`], and every call expression receives a site id and a
//! resolved [`CallTarget`]. Calls to a module function that has at least one
//! layer are marked [`CallTarget::Contextual`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

use crate::span::SourceSpan;
use crate::syntax::*;

/// Separator between a function name and its encoded constraints.
pub const CONTEXT_MARKER: &str = "__$context$__";

/// Encodes a layered variant name.
///
/// Constraints are sorted by context name and joined as `ctx_value` pairs
/// separated by `__`. Underscores inside names are written as `$_` so the
/// encoding stays injective; `$` never occurs in identifiers.
///
/// # Panics
///
/// Panics when `constraints` is empty: base variants keep their plain name.
pub fn mangle(name: &str, constraints: &[(String, String)]) -> String {
    assert!(!constraints.is_empty(), "mangle called without constraints for `{name}`");
    let mut sorted: Vec<&(String, String)> = constraints.iter().collect();
    sorted.sort();
    let mut out = String::with_capacity(name.len() + CONTEXT_MARKER.len() + 16 * sorted.len());
    out.push_str(name);
    out.push_str(CONTEXT_MARKER);
    for (i, (context, value)) in sorted.into_iter().enumerate() {
        if i > 0 {
            out.push_str("__");
        }
        out.push_str(&context.replace('_', "$_"));
        out.push('_');
        out.push_str(&value.replace('_', "$_"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariantId {
    pub mangled: String,
    /// Position among the declarations sharing this function name.
    pub declaration_index: usize,
}

#[derive(Debug)]
pub struct Variant {
    pub id: VariantId,
    pub function_name: String,
    /// Sorted by context name; empty for the base variant.
    pub constraints: Vec<(String, String)>,
    pub mode: CompositionMode,
    pub body: Rc<Lambda>,
    pub arity: usize,
}

impl Variant {
    pub fn from_lambda(function_name: &str, body: Rc<Lambda>, declaration_index: usize) -> Variant {
        let (constraints, mode, mangled) = match &body.layer {
            Some(layer) => {
                let set = layer.constraint_set();
                let mangled = mangle(function_name, &set);
                (set, layer.mode, mangled)
            }
            None => (Vec::new(), CompositionMode::Replace, function_name.to_string()),
        };
        Variant {
            id: VariantId { mangled, declaration_index },
            function_name: function_name.to_string(),
            constraints,
            mode,
            arity: body.arity(),
            body,
        }
    }

    pub fn is_base(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn span(&self) -> &SourceSpan {
        &self.body.span
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TableError {
    #[error("`{name}` already has a base variant")]
    DuplicateBase { name: String },
    #[error("`{name}` already has a layer with constraints {constraints}")]
    DuplicateLayer { name: String, constraints: String },
    #[error("`{name}` variants take {expected} parameters, this one takes {found}")]
    ArityMismatch { name: String, expected: usize, found: usize },
}

/// All variants of one function name.
#[derive(Clone, Debug)]
pub struct VariantTable {
    pub function_name: String,
    pub base: Option<Rc<Variant>>,
    /// Declaration order.
    pub layers: Vec<Rc<Variant>>,
}

impl VariantTable {
    pub fn new(function_name: impl Into<String>) -> Self {
        VariantTable { function_name: function_name.into(), base: None, layers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.layers.len() + usize::from(self.base.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn arity(&self) -> Option<usize> {
        self.base.as_ref().or(self.layers.first()).map(|v| v.arity)
    }

    pub fn is_contextual(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Index for the next declaration of this name.
    pub fn next_declaration_index(&self) -> usize {
        self.len()
    }

    pub fn insert(&mut self, variant: Variant) -> Result<(), TableError> {
        if let Some(expected) = self.arity() {
            if expected != variant.arity {
                return Err(TableError::ArityMismatch {
                    name: self.function_name.clone(),
                    expected,
                    found: variant.arity,
                });
            }
        }
        if variant.is_base() {
            if self.base.is_some() {
                return Err(TableError::DuplicateBase { name: self.function_name.clone() });
            }
            self.base = Some(Rc::new(variant));
        } else {
            if self.layers.iter().any(|l| l.constraints == variant.constraints) {
                return Err(TableError::DuplicateLayer {
                    name: self.function_name.clone(),
                    constraints: render_constraints(&variant.constraints),
                });
            }
            self.layers.push(Rc::new(variant));
        }
        Ok(())
    }

    /// Every variant, in declaration order.
    pub fn variants(&self) -> Vec<&Rc<Variant>> {
        let mut all: Vec<&Rc<Variant>> = self.base.iter().chain(self.layers.iter()).collect();
        all.sort_by_key(|v| v.id.declaration_index);
        all
    }

    pub fn find(&self, id: &VariantId) -> Option<&Rc<Variant>> {
        self.base.iter().chain(self.layers.iter()).find(|v| v.id == *id)
    }
}

pub fn render_constraints(constraints: &[(String, String)]) -> String {
    if constraints.is_empty() {
        return "-".to_string();
    }
    constraints.iter().map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug)]
pub struct LoweredModule {
    pub name: String,
    pub file: Arc<str>,
    /// Span of the module header.
    pub span: SourceSpan,
    pub tables: BTreeMap<String, VariantTable>,
    pub context_ctors: Vec<String>,
    pub context_ctor_spans: Vec<SourceSpan>,
    pub contextual_call_names: BTreeSet<String>,
    /// Number of call sites assigned; ids are `0..site_count`.
    pub site_count: u32,
}

impl LoweredModule {
    pub fn table(&self, name: &str) -> Option<&VariantTable> {
        self.tables.get(name)
    }

    pub fn declares_context(&self, name: &str) -> bool {
        self.context_ctors.iter().any(|c| c == name)
    }

    /// Line-oriented dump of the variant tables:
    /// `TABLE <fn> VARIANT <mangled> MODE <mode> CONSTRAINTS <c=v,...>`.
    pub fn emit_ir(&self) -> String {
        let mut out = String::new();
        for (name, table) in &self.tables {
            for v in table.variants() {
                let _ = writeln!(
                    out,
                    "TABLE {name} VARIANT {} MODE {} CONSTRAINTS {}",
                    v.id.mangled,
                    v.mode,
                    render_constraints(&v.constraints)
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LowerError {
    #[error("{span}: `proceed` used outside a layered function body")]
    ProceedOutsideLayer { span: SourceSpan },
    #[error("{span}: `{name}` variants take {expected} parameters, this one takes {found}")]
    ArityMismatch { span: SourceSpan, name: String, expected: usize, found: usize },
    #[error("{span}: context `{context}` is not declared by module `{module}`")]
    UnknownContext { span: SourceSpan, context: String, module: String },
    #[error("{span}: `{name}` has a before/after layer but no base variant to run")]
    MissingBase { span: SourceSpan, name: String },
}

impl LowerError {
    pub fn kind(&self) -> &'static str {
        match self {
            LowerError::ProceedOutsideLayer { .. } => "ProceedOutsideLayerError",
            LowerError::ArityMismatch { .. } => "ArityMismatchError",
            LowerError::UnknownContext { .. } => "UnknownContextError",
            LowerError::MissingBase { .. } => "MissingBaseError",
        }
    }

    pub fn span(&self) -> &SourceSpan {
        match self {
            LowerError::ProceedOutsideLayer { span }
            | LowerError::ArityMismatch { span, .. }
            | LowerError::UnknownContext { span, .. }
            | LowerError::MissingBase { span, .. } => span,
        }
    }
}

pub fn lower(ast: &ModuleAst) -> Result<LoweredModule, LowerError> {
    let context_ctors: Vec<String> =
        ast.context_decl.iter().flat_map(|d| d.names()).map(str::to_string).collect();
    let function_names: HashSet<String> = ast.decls.iter().map(|d| d.name.clone()).collect();
    let contextual: BTreeSet<String> =
        ast.decls.iter().filter(|d| d.lambda.layer.is_some()).map(|d| d.name.clone()).collect();

    let mut resolver = Resolver {
        module: &ast.name,
        contexts: &context_ctors,
        functions: &function_names,
        contextual: &contextual,
        scopes: Vec::new(),
        next_site: 0,
    };

    let mut tables: BTreeMap<String, VariantTable> = BTreeMap::new();
    for decl in &ast.decls {
        let mut lambda = (*decl.lambda).clone();
        resolver.scopes.clear();
        resolver.lambda(&mut lambda)?;
        let table = tables.entry(decl.name.clone()).or_insert_with(|| VariantTable::new(&decl.name));
        let variant = Variant::from_lambda(&decl.name, Rc::new(lambda), table.next_declaration_index());
        table.insert(variant).map_err(|e| match e {
            TableError::ArityMismatch { name, expected, found } => {
                LowerError::ArityMismatch { span: decl.span.clone(), name, expected, found }
            }
            // The parser already rejects duplicate bases and layers.
            other => unreachable!("duplicate declaration survived parsing: {other}"),
        })?;
    }

    for table in tables.values() {
        if table.base.is_none() {
            if let Some(layer) = table.layers.iter().find(|l| l.mode != CompositionMode::Replace) {
                return Err(LowerError::MissingBase {
                    span: layer.span().clone(),
                    name: table.function_name.clone(),
                });
            }
        }
    }

    let site_count = resolver.next_site;
    Ok(LoweredModule {
        name: ast.name.clone(),
        file: ast.span.file.clone(),
        span: ast.span.clone(),
        context_ctor_spans: ast.context_decl.iter().flat_map(|d| d.ctors.iter().map(|c| c.span.clone())).collect(),
        tables,
        context_ctors,
        contextual_call_names: contextual,
        site_count,
    })
}

struct Resolver<'a> {
    module: &'a str,
    contexts: &'a [String],
    functions: &'a HashSet<String>,
    contextual: &'a BTreeSet<String>,
    scopes: Vec<HashSet<String>>,
    next_site: u32,
}

impl Resolver<'_> {
    fn site(&mut self) -> SiteId {
        let id = SiteId(self.next_site);
        self.next_site += 1;
        id
    }

    fn is_local(&self, name: &str) -> bool {
        self.scopes.iter().rev().any(|s| s.contains(name))
    }

    fn declare(&mut self, name: &str) {
        if let Some(scope) = self.scopes.last_mut() {
            scope.insert(name.to_string());
        }
    }

    fn lambda(&mut self, lambda: &mut Lambda) -> Result<(), LowerError> {
        let layered = lambda.layer.is_some();
        if let Some(layer) = &lambda.layer {
            for c in &layer.constraints {
                if !self.contexts.contains(&c.context) {
                    return Err(LowerError::UnknownContext {
                        span: c.span.clone(),
                        context: c.context.clone(),
                        module: self.module.to_string(),
                    });
                }
            }
        }
        self.scopes.push(lambda.params.iter().map(|p| p.name.clone()).collect());
        let result = match &mut lambda.body {
            Body::Compact(e) => self.expr(e, layered),
            Body::Block(b) => self.block(b, layered),
        };
        self.scopes.pop();
        result
    }

    fn block(&mut self, block: &mut Block, layered: bool) -> Result<(), LowerError> {
        self.scopes.push(HashSet::new());
        let result = block.stmts.iter_mut().try_for_each(|s| self.stmt(s, layered));
        self.scopes.pop();
        result
    }

    fn stmt(&mut self, stmt: &mut Stmt, layered: bool) -> Result<(), LowerError> {
        match &mut stmt.kind {
            StmtKind::Let { name, value } => {
                self.expr(value, layered)?;
                self.declare(&name.name);
                Ok(())
            }
            StmtKind::Assign { value, .. } => self.expr(value, layered),
            StmtKind::Return(value) => value.as_mut().map_or(Ok(()), |v| self.expr(v, layered)),
            StmtKind::If { cond, then_block, else_branch } => {
                self.expr(cond, layered)?;
                self.block(then_block, layered)?;
                else_branch.as_mut().map_or(Ok(()), |s| self.stmt(s, layered))
            }
            StmtKind::While { cond, body } => {
                self.expr(cond, layered)?;
                self.block(body, layered)
            }
            StmtKind::Expr(e) => self.expr(e, layered),
            StmtKind::Block(b) => self.block(b, layered),
        }
    }

    fn exprs(&mut self, exprs: &mut [Expr], layered: bool) -> Result<(), LowerError> {
        exprs.iter_mut().try_for_each(|e| self.expr(e, layered))
    }

    fn expr(&mut self, expr: &mut Expr, layered: bool) -> Result<(), LowerError> {
        match &mut expr.kind {
            ExprKind::Int(_)
            | ExprKind::Float(_)
            | ExprKind::Str(_)
            | ExprKind::Bool(_)
            | ExprKind::Null
            | ExprKind::Ident(_) => Ok(()),
            ExprKind::List(items) => self.exprs(items, layered),
            ExprKind::Binary { lhs, rhs, .. } => {
                self.expr(lhs, layered)?;
                self.expr(rhs, layered)
            }
            ExprKind::Unary { operand, .. } => self.expr(operand, layered),
            ExprKind::Call(call) => {
                call.site = self.site();
                let name = call.callee.name.as_str();
                call.target = if self.is_local(name) {
                    CallTarget::Local
                } else if self.contextual.contains(name) {
                    CallTarget::Contextual
                } else if self.functions.contains(name) {
                    CallTarget::Function
                } else if let Some(builtin) = Builtin::from_name(name) {
                    CallTarget::Builtin(builtin)
                } else {
                    CallTarget::Unresolved
                };
                self.exprs(&mut call.args, layered)
            }
            ExprKind::MethodCall { receiver, args, site, .. } => {
                *site = self.site();
                self.expr(receiver, layered)?;
                self.exprs(args, layered)
            }
            ExprKind::Proceed(args) => {
                if !layered {
                    return Err(LowerError::ProceedOutsideLayer { span: expr.span.clone() });
                }
                self.exprs(args, layered)
            }
            ExprKind::Lambda(lambda) => self.lambda(Rc::make_mut(lambda)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(c, v)| (c.to_string(), v.to_string())).collect()
    }

    fn lower_src(src: &str) -> Result<LoweredModule, LowerError> {
        lower(&parse_source(src, "t.congo").unwrap())
    }

    #[test]
    fn mangle_single_constraint() {
        assert_eq!(mangle("getPos", &pairs(&[("ConfusedHero", "TRUE")])), "getPos__$context$__ConfusedHero_TRUE");
    }

    #[test]
    fn mangle_sorts_by_context() {
        assert_eq!(mangle("f", &pairs(&[("B", "X"), ("A", "Y")])), "f__$context$__A_Y__B_X");
    }

    #[test]
    #[should_panic(expected = "without constraints")]
    fn mangle_rejects_empty() {
        mangle("f", &[]);
    }

    #[test]
    fn mangle_injective_over_two_constraint_permutations() {
        // Every ordered pair of distinct (context, value) constraints over a
        // small alphabet, including underscores that a naive encoding would
        // confuse with separators.
        let names = ["A", "B", "A_B", "B_", "_A", "X", "X_Y", "Y"];
        let mut seen: std::collections::HashMap<String, BTreeSet<(String, String)>> = Default::default();
        for c1 in names {
            for v1 in names {
                for c2 in names {
                    for v2 in names {
                        if c1 == c2 {
                            continue;
                        }
                        let set: BTreeSet<_> = pairs(&[(c1, v1), (c2, v2)]).into_iter().collect();
                        let m = mangle("f", &set.iter().cloned().collect::<Vec<_>>());
                        let forward = mangle("f", &pairs(&[(c1, v1), (c2, v2)]));
                        let backward = mangle("f", &pairs(&[(c2, v2), (c1, v1)]));
                        assert_eq!(forward, backward);
                        assert_eq!(m, forward);
                        if let Some(prev) = seen.insert(m.clone(), set.clone()) {
                            assert_eq!(prev, set, "collision on {m}");
                        }
                    }
                }
            }
        }
        // Single-constraint names never collide with two-constraint names.
        for c in names {
            for v in names {
                let m = mangle("f", &pairs(&[(c, v)]));
                assert!(!seen.contains_key(&m), "{m}");
            }
        }
    }

    #[test]
    fn layered_move_gets_mangled_name() {
        let m = lower_src(
            "module m
             contexts = [ConfusedHero()]
             function move = |dir| -> dir
             function move = |dir|@(ConfusedHero=TRUE) -> proceed(dir)",
        )
        .unwrap();
        let table = m.table("move").unwrap();
        assert_eq!(table.layers[0].id.mangled, "move__$context$__ConfusedHero_TRUE");
        assert_eq!(table.base.as_ref().unwrap().id.mangled, "move");
        assert!(m.contextual_call_names.contains("move"));
    }

    #[test]
    fn base_only_function_is_not_contextual() {
        let m = lower_src("module m\nfunction f = || -> 1").unwrap();
        let table = m.table("f").unwrap();
        assert!(table.base.is_some() && table.layers.is_empty());
        assert!(m.contextual_call_names.is_empty());
    }

    #[test]
    fn unknown_context() {
        let err = lower_src("module m\ncontexts = [Weather()]\nfunction f = ||@(Ghost=TRUE) -> 1").unwrap_err();
        assert_eq!(err.kind(), "UnknownContextError");
        assert_eq!((err.span().line, err.span().column), (3, 18));
    }

    #[test]
    fn proceed_outside_layer() {
        let err = lower_src("module m\nfunction f = |x| -> proceed(x)").unwrap_err();
        assert_eq!(err.kind(), "ProceedOutsideLayerError");
        // A nested plain lambda inside a layer does not inherit the frame.
        let err = lower_src(
            "module m\ncontexts = [Weather()]\nfunction f = |x|@(Weather=RAINY) { let g = |y| -> proceed(y)\n return g(x) }",
        )
        .unwrap_err();
        assert_eq!(err.kind(), "ProceedOutsideLayerError");
    }

    #[test]
    fn arity_mismatch() {
        let err =
            lower_src("module m\ncontexts = [Weather()]\nfunction f = |x| -> x\nfunction f = ||@(Weather=RAINY) -> 1")
                .unwrap_err();
        assert_eq!(err.kind(), "ArityMismatchError");
        assert_eq!(err.span().line, 4);
    }

    #[test]
    fn before_layer_without_base() {
        let err = lower_src("module m\ncontexts = [Weather()]\nfunction f = ||@(Weather=RAINY)+ -> 1").unwrap_err();
        assert_eq!(err.kind(), "MissingBaseError");
        assert!(lower_src("module m\ncontexts = [Weather()]\nfunction f = ||@(Weather=RAINY) -> 1").is_ok());
    }

    #[test]
    fn call_targets_resolved() {
        let m = lower_src(
            "module m
             contexts = [Weather()]
             function f = || -> 1
             function f = ||@(Weather=RAINY) -> 2
             function g = || -> 3
             function main = |h| {
               let f2 = |x| -> x
               println(f() + g() + h(1) + f2(2) + nope())
             }",
        )
        .unwrap();
        let main = m.table("main").unwrap().base.clone().unwrap();
        let mut targets = Vec::new();
        collect_targets(&main.body, &mut targets);
        assert_eq!(
            targets,
            vec![
                ("println".to_string(), CallTarget::Builtin(Builtin::Println)),
                ("f".to_string(), CallTarget::Contextual),
                ("g".to_string(), CallTarget::Function),
                ("h".to_string(), CallTarget::Local),
                ("f2".to_string(), CallTarget::Local),
                ("nope".to_string(), CallTarget::Unresolved),
            ]
        );
        assert_eq!(m.site_count, 6);
    }

    fn collect_targets(lambda: &Lambda, out: &mut Vec<(String, CallTarget)>) {
        fn expr(e: &Expr, out: &mut Vec<(String, CallTarget)>) {
            match &e.kind {
                ExprKind::Call(c) => {
                    out.push((c.callee.name.clone(), c.target));
                    c.args.iter().for_each(|a| expr(a, out));
                }
                ExprKind::Binary { lhs, rhs, .. } => {
                    expr(lhs, out);
                    expr(rhs, out);
                }
                ExprKind::Lambda(l) => collect_targets(l, out),
                _ => {}
            }
        }
        match &lambda.body {
            Body::Compact(e) => expr(e, out),
            Body::Block(b) => {
                for s in &b.stmts {
                    match &s.kind {
                        StmtKind::Expr(e) | StmtKind::Let { value: e, .. } => expr(e, out),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn ir_dump() {
        let m = lower_src(
            "module m
             contexts = [ConfusedHero(), Weather()]
             function f = |x| -> x
             function f = |x|+@(Weather=RAINY, ConfusedHero=TRUE) -> x",
        )
        .unwrap();
        assert_eq!(
            m.emit_ir(),
            "TABLE f VARIANT f MODE REPLACE CONSTRAINTS -\n\
             TABLE f VARIANT f__$context$__ConfusedHero_TRUE__Weather_RAINY MODE AFTER_BASE CONSTRAINTS ConfusedHero=TRUE,Weather=RAINY\n"
        );
    }
}
