use std::cmp::Ordering;
use std::collections::HashMap;
use std::rc::Rc;

use super::error::{ErrorKind, RuntimeError};
use super::value::{ChainLink, Closure, DynObject, Env, MethodTable, ObjectRef, Scope, Value};
use super::Runtime;
use crate::context::Scalar;
use crate::decision::DecisionMakerHandle;
use crate::lower::{TableError, Variant, VariantTable};
use crate::messaging::{ContextChanged, Payload, Topic};
use crate::span::SourceSpan;
use crate::syntax::{BinaryOp, Block, Body, Builtin, Call, CallTarget, CompositionMode, Expr, ExprKind, Lambda, SiteId};
use crate::syntax::{Stmt, StmtKind, UnaryOp};

const CONTEXT_CHANGED_PREFIX: &str = "congo/context/changed";

/// Object methods handled by the runtime itself.
const OBJECT_BUILTINS: [&str; 3] = ["define", "contexts", "decisionmaker"];

/// The rest of a chain, as seen by the element currently running.
#[derive(Clone, Debug)]
pub(super) struct ProceedFrame {
    pub chain: Rc<[ChainLink]>,
    /// Index of the element `proceed` runs next.
    pub next: usize,
    pub receiver: Option<Value>,
    pub original_args: Rc<[Value]>,
    pub function: Rc<str>,
}

pub(super) enum Unwind {
    Return(Value),
    Error(Box<RuntimeError>),
}

impl From<RuntimeError> for Unwind {
    fn from(e: RuntimeError) -> Self {
        Unwind::Error(Box::new(e))
    }
}

type Exec<T> = Result<T, Unwind>;

fn type_error(span: &SourceSpan, message: impl Into<String>) -> RuntimeError {
    RuntimeError::at(ErrorKind::Type, span, message)
}

impl Runtime {
    /// Calls a function body with `receiver` bound to the first parameter.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn invoke(
        &mut self,
        name: &str,
        lambda: &Rc<Lambda>,
        env: Option<&Env>,
        receiver: Option<&Value>,
        args: &[Value],
        frame: Option<&ProceedFrame>,
        call_span: &SourceSpan,
    ) -> Result<Value, RuntimeError> {
        let given = args.len() + usize::from(receiver.is_some());
        if given != lambda.arity() {
            let this = if receiver.is_some() { " including `this`" } else { "" };
            return Err(RuntimeError::at(
                ErrorKind::ArityMismatch,
                call_span,
                format!("`{name}` takes {} argument(s){this}, got {given}", lambda.arity()),
            ));
        }
        if self.depth >= self.max_depth {
            return Err(RuntimeError::at(
                ErrorKind::StackOverflow,
                call_span,
                format!("call depth exceeds {}", self.max_depth),
            ));
        }
        let scope = Scope::child(env);
        for (param, value) in lambda.params.iter().zip(receiver.into_iter().chain(args)) {
            scope.define(&param.name, value.clone());
        }
        self.depth += 1;
        let result = match &lambda.body {
            Body::Compact(expr) => self.eval(expr, &scope, frame),
            Body::Block(block) => self.exec_stmts(&block.stmts, &scope, frame).map(|()| Value::Null),
        };
        self.depth -= 1;
        match result {
            Ok(v) | Err(Unwind::Return(v)) => Ok(v),
            Err(Unwind::Error(mut e)) => {
                e.trace.push(format!("at {name} ({})", lambda.span));
                Err(*e)
            }
        }
    }

    /// Runs `at.chain[at.next]` with `args`.
    pub(super) fn exec_link(
        &mut self,
        at: &ProceedFrame,
        args: &Rc<[Value]>,
        span: &SourceSpan,
    ) -> Result<Value, RuntimeError> {
        let Some(link) = at.chain.get(at.next).cloned() else {
            return Err(RuntimeError::at(
                ErrorKind::ProceedExhausted,
                span,
                format!("`{}` has no further variant to proceed to", at.function),
            ));
        };
        let inner = ProceedFrame { next: at.next + 1, original_args: args.clone(), ..at.clone() };
        let variant = &link.variant;
        let name = variant.id.mangled.as_str();
        let receiver = at.receiver.as_ref();
        let env = link.env.as_ref();
        match variant.mode {
            CompositionMode::Replace => self.invoke(name, &variant.body, env, receiver, args, Some(&inner), span),
            CompositionMode::BeforeBase => {
                self.invoke(name, &variant.body, env, receiver, args, Some(&inner), span)?;
                self.exec_link(&inner, args, span)
            }
            CompositionMode::AfterBase => {
                let result = self.exec_link(&inner, args, span)?;
                self.invoke(name, &variant.body, env, receiver, args, Some(&inner), span)?;
                Ok(result)
            }
        }
    }

    fn exec_stmts(&mut self, stmts: &[Stmt], env: &Env, frame: Option<&ProceedFrame>) -> Exec<()> {
        for stmt in stmts {
            self.exec_stmt(stmt, env, frame)?;
        }
        Ok(())
    }

    fn exec_block(&mut self, block: &Block, env: &Env, frame: Option<&ProceedFrame>) -> Exec<()> {
        let scope = Scope::child(Some(env));
        self.exec_stmts(&block.stmts, &scope, frame)
    }

    fn exec_stmt(&mut self, stmt: &Stmt, env: &Env, frame: Option<&ProceedFrame>) -> Exec<()> {
        match &stmt.kind {
            StmtKind::Let { name, value } => {
                let v = self.eval(value, env, frame)?;
                env.define(&name.name, v);
            }
            StmtKind::Assign { name, value } => {
                let v = self.eval(value, env, frame)?;
                if !env.assign(&name.name, v) {
                    return Err(RuntimeError::at(
                        ErrorKind::UndefinedVariable,
                        &name.span,
                        format!("assignment to undeclared variable `{}`", name.name),
                    )
                    .into());
                }
            }
            StmtKind::Return(value) => {
                let v = match value {
                    Some(e) => self.eval(e, env, frame)?,
                    None => Value::Null,
                };
                return Err(Unwind::Return(v));
            }
            StmtKind::If { cond, then_block, else_branch } => {
                if self.condition(cond, env, frame)? {
                    self.exec_block(then_block, env, frame)?;
                } else if let Some(branch) = else_branch {
                    self.exec_stmt(branch, env, frame)?;
                }
            }
            StmtKind::While { cond, body } => {
                while self.condition(cond, env, frame)? {
                    self.exec_block(body, env, frame)?;
                }
            }
            StmtKind::Expr(e) => {
                self.eval(e, env, frame)?;
            }
            StmtKind::Block(block) => self.exec_block(block, env, frame)?,
        }
        Ok(())
    }

    fn condition(&mut self, cond: &Expr, env: &Env, frame: Option<&ProceedFrame>) -> Exec<bool> {
        match self.eval(cond, env, frame)? {
            Value::Bool(b) => Ok(b),
            other => Err(type_error(&cond.span, format!("condition must be a boolean, found {}", other.type_name())).into()),
        }
    }

    fn eval_args(&mut self, args: &[Expr], env: &Env, frame: Option<&ProceedFrame>) -> Exec<Vec<Value>> {
        args.iter().map(|a| self.eval(a, env, frame)).collect()
    }

    fn eval(&mut self, expr: &Expr, env: &Env, frame: Option<&ProceedFrame>) -> Exec<Value> {
        let span = &expr.span;
        Ok(match &expr.kind {
            ExprKind::Int(i) => Value::Int(*i),
            ExprKind::Float(x) => Value::Float(*x),
            ExprKind::Str(s) => Value::str(s),
            ExprKind::Bool(b) => Value::Bool(*b),
            ExprKind::Null => Value::Null,
            ExprKind::Ident(name) => self.lookup(name, env, span)?,
            ExprKind::List(items) => Value::list(self.eval_args(items, env, frame)?),
            ExprKind::Binary { op: BinaryOp::And, lhs, rhs } => {
                Value::Bool(self.condition(lhs, env, frame)? && self.condition(rhs, env, frame)?)
            }
            ExprKind::Binary { op: BinaryOp::Or, lhs, rhs } => {
                Value::Bool(self.condition(lhs, env, frame)? || self.condition(rhs, env, frame)?)
            }
            ExprKind::Binary { op, lhs, rhs } => {
                let l = self.eval(lhs, env, frame)?;
                let r = self.eval(rhs, env, frame)?;
                binary(*op, l, r, span)?
            }
            ExprKind::Unary { op, operand } => {
                let v = self.eval(operand, env, frame)?;
                match (op, v) {
                    (UnaryOp::Not, Value::Bool(b)) => Value::Bool(!b),
                    (UnaryOp::Neg, Value::Int(i)) => Value::Int(
                        i.checked_neg()
                            .ok_or_else(|| RuntimeError::at(ErrorKind::IntegerOverflow, span, "integer overflow in negation"))?,
                    ),
                    (UnaryOp::Neg, Value::Float(x)) => Value::Float(-x),
                    (UnaryOp::Not, v) => return Err(type_error(span, format!("`not` needs a boolean, found {}", v.type_name())).into()),
                    (UnaryOp::Neg, v) => return Err(type_error(span, format!("cannot negate {}", v.type_name())).into()),
                }
            }
            ExprKind::Call(call) => self.eval_call(call, env, frame, span)?,
            ExprKind::MethodCall { receiver, method, args, site } => {
                let recv = self.eval(receiver, env, frame)?;
                let args = self.eval_args(args, env, frame)?;
                self.method_call(recv, &method.name, args, *site, &method.span)?
            }
            ExprKind::Proceed(args) => {
                let args = if args.is_empty() { None } else { Some(self.eval_args(args, env, frame)?) };
                let Some(frame) = frame else {
                    return Err(RuntimeError::at(
                        ErrorKind::ProceedExhausted,
                        span,
                        "`proceed` called outside a composition chain",
                    )
                    .into());
                };
                let args = args.map(Rc::from).unwrap_or_else(|| frame.original_args.clone());
                self.exec_link(frame, &args, span)?
            }
            ExprKind::Lambda(lambda) => Value::Function(Rc::new(Closure { lambda: lambda.clone(), env: Some(env.clone()) })),
        })
    }

    fn lookup(&self, name: &str, env: &Env, span: &SourceSpan) -> Result<Value, RuntimeError> {
        if let Some(v) = env.lookup(name) {
            return Ok(v);
        }
        if let Some(table) = self.module.table(name) {
            return match &table.base {
                Some(base) if !table.is_contextual() => {
                    Ok(Value::Function(Rc::new(Closure { lambda: base.body.clone(), env: None })))
                }
                _ => Err(type_error(span, format!("contextual function `{name}` cannot be used as a value"))),
            };
        }
        if self.module.declares_context(name) {
            return Ok(Value::str(name));
        }
        Err(RuntimeError::at(ErrorKind::UndefinedVariable, span, format!("undefined variable `{name}`")))
    }

    fn eval_call(&mut self, call: &Call, env: &Env, frame: Option<&ProceedFrame>, span: &SourceSpan) -> Exec<Value> {
        let name = call.callee.name.as_str();
        let args = self.eval_args(&call.args, env, frame)?;
        let module = self.module.clone();
        Ok(match call.target {
            CallTarget::Local => match env.lookup(name) {
                Some(Value::Function(closure)) => {
                    self.invoke(name, &closure.lambda, closure.env.as_ref(), None, &args, None, span)?
                }
                Some(other) => return Err(type_error(span, format!("`{name}` is a {}, not a function", other.type_name())).into()),
                None => return Err(RuntimeError::at(ErrorKind::UndefinedVariable, span, format!("undefined variable `{name}`")).into()),
            },
            CallTarget::Function => {
                let base = module.table(name).and_then(|t| t.base.as_ref()).expect("resolved to a module function");
                self.invoke(name, &base.body, None, None, &args, None, span)?
            }
            CallTarget::Contextual => self.dispatch_contextual(call.site, name, None, args, span)?,
            CallTarget::Builtin(builtin) => self.builtin(builtin, args, span)?,
            CallTarget::Unresolved => {
                return Err(RuntimeError::at(ErrorKind::UnknownFunction, span, format!("unknown function `{name}`")).into())
            }
        })
    }

    fn builtin(&mut self, builtin: Builtin, args: Vec<Value>, span: &SourceSpan) -> Result<Value, RuntimeError> {
        let expect = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(RuntimeError::at(
                    ErrorKind::ArityMismatch,
                    span,
                    format!("`{}` takes {n} argument(s), got {}", builtin.name(), args.len()),
                ))
            }
        };
        match builtin {
            Builtin::DynamicObject => {
                expect(0)?;
                let id = self.next_object_id;
                self.next_object_id += 1;
                Ok(Value::Object(Rc::new(std::cell::RefCell::new(DynObject::new(id)))))
            }
            Builtin::DecisionMaker => {
                expect(1)?;
                let name = string_arg(&args[0], "decisionMaker", span)?;
                let dm = self.registry.create(name).ok_or_else(|| {
                    RuntimeError::at(ErrorKind::UnknownDecisionMaker, span, format!("no decision-maker registered as `{name}`"))
                })?;
                dm.init(&self.dm_config);
                Ok(Value::DecisionMaker(dm))
            }
            Builtin::SetConcrete => {
                expect(3)?;
                let context = string_arg(&args[0], "setConcrete", span)?;
                let key = string_arg(&args[1], "setConcrete", span)?;
                let value = match &args[2] {
                    Value::Bool(b) => Scalar::Bool(*b),
                    Value::Int(i) => Scalar::Int(*i),
                    Value::Float(x) => Scalar::Float(*x),
                    Value::Str(s) => Scalar::Str(s.to_string()),
                    other => return Err(type_error(span, format!("cannot store a {} as a concrete value", other.type_name()))),
                };
                let topic = Topic::parse(CONTEXT_CHANGED_PREFIX)
                    .and_then(|t| t.child(context))
                    .map_err(|e| type_error(span, format!("invalid context name `{context}`: {e}")))?;
                let epoch = self.store.set(context, key, value);
                let event = ContextChanged { context: context.to_string(), key: key.to_string(), epoch };
                self.bus
                    .publish(topic, Payload::ContextChanged(event))
                    .map_err(|e| RuntimeError::at(ErrorKind::BusClosed, span, e.to_string()))?;
                Ok(Value::Null)
            }
            Builtin::CurrentMeta => {
                expect(1)?;
                let context = string_arg(&args[0], "currentMeta", span)?;
                let descriptor = self.contexts.context(&self.module.name, context).ok_or_else(|| {
                    RuntimeError::at(
                        ErrorKind::UnknownContext,
                        span,
                        format!("context `{context}` is not declared by module `{}`", self.module.name),
                    )
                })?;
                let metas = self.store.read(|view| descriptor.evaluate(view)).map_err(|cause| {
                    RuntimeError::at(ErrorKind::ContextEvaluation, span, format!("context `{context}` failed to evaluate: {cause}"))
                })?;
                Ok(Value::list(metas.iter().map(|m| Value::str(m.as_str())).collect()))
            }
            Builtin::Println | Builtin::Print => {
                let mut text = args.iter().map(Value::to_string).collect::<Vec<_>>().join(" ");
                if builtin == Builtin::Println {
                    text.push('\n');
                }
                self.emit(&text);
                Ok(Value::Null)
            }
        }
    }

    fn method_call(
        &mut self,
        recv: Value,
        method: &str,
        mut args: Vec<Value>,
        site: SiteId,
        span: &SourceSpan,
    ) -> Result<Value, RuntimeError> {
        let Value::Object(obj) = &recv else {
            return Err(type_error(span, format!("cannot call method `{method}` on a {}", recv.type_name())));
        };
        let obj = obj.clone();
        match method {
            "define" => {
                expect_args(&args, 2, method, span)?;
                let name = string_arg(&args[0], method, span)?.to_string();
                define(&obj, &name, args.pop().expect("two arguments"), span)?;
                return Ok(recv);
            }
            "contexts" => {
                expect_args(&args, 1, method, span)?;
                let names = self.context_list(&args[0], span)?;
                obj.borrow_mut().contexts_override = Some(names);
                return Ok(recv);
            }
            "decisionmaker" => {
                expect_args(&args, 1, method, span)?;
                let dm: Option<DecisionMakerHandle> = match &args[0] {
                    Value::DecisionMaker(dm) => Some(dm.clone()),
                    Value::Null => None,
                    other => return Err(type_error(span, format!("`decisionmaker` needs a decision-maker, found {}", other.type_name()))),
                };
                obj.borrow_mut().decision_maker = dm;
                return Ok(recv);
            }
            _ => {}
        }

        enum Target {
            Contextual,
            Base(Rc<Variant>, Option<Env>),
            Property(Option<Value>),
        }
        let target = {
            let o = obj.borrow();
            match o.methods.get(method) {
                Some(m) if m.table.is_contextual() => Target::Contextual,
                Some(m) => {
                    let base = m.table.base.clone().expect("non-contextual tables have a base");
                    let env = m.link(&base).env;
                    Target::Base(base, env)
                }
                None => Target::Property(o.properties.get(method).cloned()),
            }
        };
        match target {
            Target::Contextual => self.dispatch_contextual(site, method, Some((&recv, &obj)), args, span),
            Target::Base(base, env) => self.invoke(method, &base.body, env.as_ref(), Some(&recv), &args, None, span),
            Target::Property(current) => match (args.len(), current) {
                (0, Some(value)) => Ok(value),
                (1, _) => {
                    obj.borrow_mut().properties.insert(method.to_string(), args.pop().expect("one argument"));
                    Ok(recv)
                }
                _ => Err(RuntimeError::at(
                    ErrorKind::UnknownMethod,
                    span,
                    format!("object #{} has no method or property `{method}`", obj.borrow().id),
                )),
            },
        }
    }

    fn context_list(&self, value: &Value, span: &SourceSpan) -> Result<Vec<String>, RuntimeError> {
        let Value::List(items) = value else {
            return Err(type_error(span, format!("`contexts` needs a list, found {}", value.type_name())));
        };
        let mut names = Vec::new();
        for item in items.borrow().iter() {
            let name = string_arg(item, "contexts", span)?;
            if !self.module.declares_context(name) {
                return Err(RuntimeError::at(
                    ErrorKind::UnknownContext,
                    span,
                    format!("context `{name}` is not declared by module `{}`", self.module.name),
                ));
            }
            names.push(name.to_string());
        }
        Ok(names)
    }
}

fn define(obj: &ObjectRef, name: &str, value: Value, span: &SourceSpan) -> Result<(), RuntimeError> {
    let redefinition = |what: String| RuntimeError::at(ErrorKind::Redefinition, span, what);
    if OBJECT_BUILTINS.contains(&name) {
        return Err(redefinition(format!("`{name}` is a built-in object method")));
    }
    let mut o = obj.borrow_mut();
    match value {
        Value::Function(closure) => {
            if o.properties.contains_key(name) {
                return Err(redefinition(format!("`{name}` is already a property")));
            }
            let methods = o
                .methods
                .entry(name.to_string())
                .or_insert_with(|| MethodTable { table: VariantTable::new(name), envs: HashMap::new() });
            let variant = Variant::from_lambda(name, closure.lambda.clone(), methods.table.next_declaration_index());
            let id = variant.id.clone();
            methods.table.insert(variant).map_err(|e| match e {
                TableError::ArityMismatch { .. } => RuntimeError::at(ErrorKind::ArityMismatch, span, e.to_string()),
                TableError::DuplicateBase { .. } | TableError::DuplicateLayer { .. } => redefinition(e.to_string()),
            })?;
            methods.envs.insert(id, closure.env.clone());
            o.version += 1;
        }
        other => {
            if o.methods.contains_key(name) {
                return Err(redefinition(format!("`{name}` is already a method")));
            }
            o.properties.insert(name.to_string(), other);
        }
    }
    Ok(())
}

fn expect_args(args: &[Value], n: usize, name: &str, span: &SourceSpan) -> Result<(), RuntimeError> {
    if args.len() == n {
        Ok(())
    } else {
        Err(RuntimeError::at(ErrorKind::ArityMismatch, span, format!("`{name}` takes {n} argument(s), got {}", args.len())))
    }
}

fn string_arg<'a>(value: &'a Value, name: &str, span: &SourceSpan) -> Result<&'a str, RuntimeError> {
    value.as_str().ok_or_else(|| type_error(span, format!("`{name}` needs a string, found {}", value.type_name())))
}

fn binary(op: BinaryOp, l: Value, r: Value, span: &SourceSpan) -> Result<Value, RuntimeError> {
    match op {
        BinaryOp::Eq => return Ok(Value::Bool(l == r)),
        BinaryOp::Ne => return Ok(Value::Bool(l != r)),
        BinaryOp::Add => match (&l, &r) {
            (Value::Str(_), _) | (_, Value::Str(_)) => return Ok(Value::str(&format!("{l}{r}"))),
            (Value::List(a), Value::List(b)) => {
                let items = a.borrow().iter().chain(b.borrow().iter()).cloned().collect();
                return Ok(Value::list(items));
            }
            _ => {}
        },
        BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => {
            let ordering = match (&l, &r) {
                (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
                (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
                _ => match (as_float(&l), as_float(&r)) {
                    (Some(a), Some(b)) => a.partial_cmp(&b),
                    _ => {
                        return Err(type_error(
                            span,
                            format!("cannot compare {} with {}", l.type_name(), r.type_name()),
                        ))
                    }
                },
            };
            let result = match ordering {
                None => false,
                Some(o) => match op {
                    BinaryOp::Lt => o == Ordering::Less,
                    BinaryOp::Le => o != Ordering::Greater,
                    BinaryOp::Gt => o == Ordering::Greater,
                    _ => o != Ordering::Less,
                },
            };
            return Ok(Value::Bool(result));
        }
        _ => {}
    }
    if let (Value::Int(a), Value::Int(b)) = (&l, &r) {
        let (a, b) = (*a, *b);
        if matches!(op, BinaryOp::Div | BinaryOp::Rem) && b == 0 {
            return Err(RuntimeError::at(ErrorKind::DivisionByZero, span, "integer division by zero"));
        }
        let result = match op {
            BinaryOp::Add => a.checked_add(b),
            BinaryOp::Sub => a.checked_sub(b),
            BinaryOp::Mul => a.checked_mul(b),
            BinaryOp::Div => a.checked_div(b),
            BinaryOp::Rem => a.checked_rem(b),
            _ => unreachable!("handled above"),
        };
        return result
            .map(Value::Int)
            .ok_or_else(|| RuntimeError::at(ErrorKind::IntegerOverflow, span, format!("integer overflow in `{a} {} {b}`", op.symbol())));
    }
    match (as_float(&l), as_float(&r)) {
        (Some(a), Some(b)) => Ok(Value::Float(match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Rem => a % b,
            _ => unreachable!("handled above"),
        })),
        _ => Err(type_error(
            span,
            format!("operator `{}` does not apply to {} and {}", op.symbol(), l.type_name(), r.type_name()),
        )),
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(x) => Some(*x),
        _ => None,
    }
}
