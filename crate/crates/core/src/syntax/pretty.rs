//! Source printer. `parse(pretty(m))` is structurally equal to `m`.

use std::fmt::Write;

use super::ast::*;

const INDENT: &str = "  ";

pub fn pretty(module: &ModuleAst) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "module {}", module.name);
    if let Some(decl) = &module.context_decl {
        let ctors: Vec<String> = decl.ctors.iter().map(|c| format!("{}()", c.name)).collect();
        let _ = writeln!(out, "\ncontexts = [{}]", ctors.join(", "));
    }
    for decl in &module.decls {
        out.push('\n');
        let _ = write!(out, "function {} = ", decl.name);
        lambda(&mut out, &decl.lambda, 0);
        out.push('\n');
    }
    out
}

fn lambda(out: &mut String, lambda: &Lambda, depth: usize) {
    let params: Vec<&str> = lambda.params.iter().map(|p| p.name.as_str()).collect();
    let _ = write!(out, "|{}|", params.join(", "));
    if let Some(layer) = &lambda.layer {
        let constraints: Vec<String> =
            layer.constraints.iter().map(|c| format!("{}={}", c.context, c.value)).collect();
        let constraints = constraints.join(", ");
        match layer.mode {
            CompositionMode::Replace => {
                let _ = write!(out, "@({constraints})");
            }
            CompositionMode::BeforeBase => {
                let _ = write!(out, "@({constraints})+");
            }
            CompositionMode::AfterBase => {
                let _ = write!(out, "+@({constraints})");
            }
        }
    }
    match &lambda.body {
        Body::Compact(e) => {
            out.push_str(" -> ");
            expr(out, e, 0, depth);
        }
        Body::Block(b) => {
            out.push(' ');
            block(out, b, depth);
        }
    }
}

fn block(out: &mut String, block: &Block, depth: usize) {
    out.push_str("{\n");
    for s in &block.stmts {
        out.push_str(&INDENT.repeat(depth + 1));
        stmt(out, s, depth + 1);
        out.push('\n');
    }
    out.push_str(&INDENT.repeat(depth));
    out.push('}');
}

fn stmt(out: &mut String, stmt: &Stmt, depth: usize) {
    match &stmt.kind {
        StmtKind::Let { name, value } => {
            let _ = write!(out, "let {} = ", name.name);
            expr(out, value, 0, depth);
        }
        StmtKind::Assign { name, value } => {
            let _ = write!(out, "{} = ", name.name);
            expr(out, value, 0, depth);
        }
        StmtKind::Return(None) => out.push_str("return"),
        StmtKind::Return(Some(value)) => {
            out.push_str("return ");
            expr(out, value, 0, depth);
        }
        StmtKind::If { cond, then_block, else_branch } => {
            out.push_str("if ");
            expr(out, cond, 0, depth);
            out.push(' ');
            block(out, then_block, depth);
            if let Some(other) = else_branch {
                out.push_str(" else ");
                match &other.kind {
                    StmtKind::Block(b) => block(out, b, depth),
                    _ => self::stmt(out, other, depth),
                }
            }
        }
        StmtKind::While { cond, body } => {
            out.push_str("while ");
            expr(out, cond, 0, depth);
            out.push(' ');
            block(out, body, depth);
        }
        StmtKind::Expr(e) => expr(out, e, 0, depth),
        StmtKind::Block(b) => block(out, b, depth),
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn args(out: &mut String, args: &[Expr], depth: usize) {
    out.push('(');
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        expr(out, a, 0, depth);
    }
    out.push(')');
}

/// Precedence of unary and postfix forms, above every binary operator.
const UNARY_PREC: u8 = 7;
const POSTFIX_PREC: u8 = 8;

fn expr_prec(e: &Expr) -> u8 {
    match &e.kind {
        ExprKind::Binary { op, .. } => op.precedence(),
        ExprKind::Unary { .. } => UNARY_PREC,
        // A compact lambda body swallows everything to its right.
        ExprKind::Lambda(_) => 0,
        ExprKind::MethodCall { .. } => POSTFIX_PREC,
        _ => u8::MAX,
    }
}

/// Prints `e`, parenthesised when its precedence is below `min_prec`.
fn expr(out: &mut String, e: &Expr, min_prec: u8, depth: usize) {
    let parens = expr_prec(e) < min_prec;
    if parens {
        out.push('(');
    }
    match &e.kind {
        ExprKind::Int(v) => {
            let _ = write!(out, "{v}");
        }
        ExprKind::Float(v) => {
            let _ = write!(out, "{v:?}");
        }
        ExprKind::Str(s) => out.push_str(&escape(s)),
        ExprKind::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        ExprKind::Null => out.push_str("null"),
        ExprKind::Ident(name) => out.push_str(name),
        ExprKind::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                expr(out, item, 0, depth);
            }
            out.push(']');
        }
        ExprKind::Binary { op, lhs, rhs } => {
            let prec = op.precedence();
            expr(out, lhs, prec, depth);
            let _ = write!(out, " {} ", op.symbol());
            expr(out, rhs, prec + 1, depth);
        }
        ExprKind::Unary { op, operand } => {
            out.push_str(match op {
                UnaryOp::Not => "not ",
                UnaryOp::Neg => "-",
            });
            // `--x` is fine for the lexer, `- -x` reads better.
            if matches!(op, UnaryOp::Neg) && matches!(operand.kind, ExprKind::Unary { op: UnaryOp::Neg, .. }) {
                out.push(' ');
            }
            expr(out, operand, UNARY_PREC, depth);
        }
        ExprKind::Call(call) => {
            out.push_str(&call.callee.name);
            args(out, &call.args, depth);
        }
        ExprKind::MethodCall { receiver, method, args: a, .. } => {
            expr(out, receiver, POSTFIX_PREC, depth);
            let _ = write!(out, ": {}", method.name);
            args(out, a, depth);
        }
        ExprKind::Proceed(a) => {
            out.push_str("proceed");
            args(out, a, depth);
        }
        ExprKind::Lambda(l) => lambda(out, l, depth),
    }
    if parens {
        out.push(')');
    }
}
