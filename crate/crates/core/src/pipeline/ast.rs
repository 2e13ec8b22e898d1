use std::fmt::{self, Write as _};

use crate::bus::TopicName;
use crate::schema::FieldPath;

/// A named, ordered list of transform stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub name: String,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Relay(TopicName),
    Clamp { path: FieldPath, min: f64, max: f64 },
    Scale { path: FieldPath, factor: f64 },
    Gate(Expr),
    Drop,
    Log(String),
    Expr(Vec<Stmt>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    If { cond: Expr, then: Vec<Stmt>, otherwise: Option<Vec<Stmt>> },
    Assign(FieldPath, Expr),
    Drop,
    Forward(TopicName),
    Emit(Emit),
}

/// Message constructor: zero-valued `schema` with the listed fields set.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageLiteral {
    pub schema: String,
    pub fields: Vec<(FieldPath, Expr)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emit {
    pub message: MessageLiteral,
    pub topic: TopicName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
    Sqrt,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Abs | Func::Sqrt => 1,
            Func::Min | Func::Max => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "||",
            BinOp::And => "&&",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    /// Binding strength; all binary operators associate to the left.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 3,
            BinOp::Add | BinOp::Sub => 4,
            BinOp::Mul | BinOp::Div => 5,
        }
    }
}

const UNARY_PRECEDENCE: u8 = 6;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Bool(bool),
    /// `msg.`-rooted field of the message being processed.
    Field(FieldPath),
    Param(String),
    Call(Func, Vec<Expr>),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Not(_) | Expr::Neg(_) => UNARY_PRECEDENCE,
            _ => UNARY_PRECEDENCE + 1,
        }
    }

    /// Whether the expression reads the incoming message.
    pub fn reads_message(&self) -> bool {
        match self {
            Expr::Field(_) => true,
            Expr::Num(_) | Expr::Bool(_) | Expr::Param(_) => false,
            Expr::Call(_, args) => args.iter().any(Expr::reads_message),
            Expr::Not(e) | Expr::Neg(e) => e.reads_message(),
            Expr::Binary(_, a, b) => a.reads_message() || b.reads_message(),
        }
    }

    fn write_child(&self, out: &mut String, min_prec: u8) {
        if self.precedence() < min_prec {
            out.push('(');
            self.write(out);
            out.push(')');
        } else {
            self.write(out);
        }
    }

    fn write(&self, out: &mut String) {
        match self {
            Expr::Num(v) => write_num(out, *v),
            Expr::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Expr::Field(p) => {
                let _ = write!(out, "msg.{p}");
            }
            Expr::Param(name) => {
                let _ = write!(out, "param({})", quote(name));
            }
            Expr::Call(f, args) => {
                out.push_str(f.name());
                out.push('(');
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    a.write(out);
                }
                out.push(')');
            }
            Expr::Not(e) => {
                out.push('!');
                e.write_child(out, UNARY_PRECEDENCE);
            }
            Expr::Neg(e) => {
                out.push('-');
                e.write_child(out, UNARY_PRECEDENCE);
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                a.write_child(out, p);
                let _ = write!(out, " {} ", op.symbol());
                b.write_child(out, p + 1);
            }
        }
    }
}

/// Shortest text that parses back to the same f64.
pub(crate) fn write_num(out: &mut String, v: f64) {
    let _ = write!(out, "{v:?}");
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write(&mut s);
        f.write_str(&s)
    }
}

impl fmt::Display for MessageLiteral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{", self.schema)?;
        for (i, (path, e)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{path} := {e}")?;
        }
        f.write_str("}")
    }
}

impl fmt::Display for Emit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "emit {} to {}", self.message, self.topic)
    }
}

fn write_block(out: &mut String, stmts: &[Stmt]) {
    out.push('{');
    for (i, s) in stmts.iter().enumerate() {
        out.push_str(if i > 0 { "; " } else { " " });
        write_stmt(out, s);
    }
    out.push_str(if stmts.is_empty() { "}" } else { " }" });
}

fn write_stmt(out: &mut String, stmt: &Stmt) {
    match stmt {
        Stmt::If { cond, then, otherwise } => {
            let _ = write!(out, "if {cond} ");
            write_block(out, then);
            if let Some(other) = otherwise {
                out.push_str(" else ");
                write_block(out, other);
            }
        }
        Stmt::Assign(path, e) => {
            let _ = write!(out, "msg.{path} := {e}");
        }
        Stmt::Drop => out.push_str("drop"),
        Stmt::Forward(t) => {
            let _ = write!(out, "forward({t})");
        }
        Stmt::Emit(emit) => {
            let _ = write!(out, "{emit}");
        }
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        write_stmt(&mut s, self);
        f.write_str(&s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        match self {
            Stage::Relay(t) => {
                let _ = write!(s, "relay to {t}");
            }
            Stage::Clamp { path, min, max } => {
                let _ = write!(s, "clamp {path} ");
                write_num(&mut s, *min);
                s.push(' ');
                write_num(&mut s, *max);
            }
            Stage::Scale { path, factor } => {
                let _ = write!(s, "scale {path} ");
                write_num(&mut s, *factor);
            }
            Stage::Gate(e) => {
                let _ = write!(s, "gate {e}");
            }
            Stage::Drop => s.push_str("drop"),
            Stage::Log(label) => {
                let _ = write!(s, "log {}", quote(label));
            }
            Stage::Expr(stmts) => match stmts.as_slice() {
                [Stmt::Emit(emit)] => {
                    let _ = write!(s, "{emit}");
                }
                _ => {
                    s.push_str("expr ");
                    write_block(&mut s, stmts);
                }
            },
        }
        f.write_str(&s)
    }
}

impl PipelineSpec {
    pub fn new(name: impl Into<String>, stages: Vec<Stage>) -> Self {
        PipelineSpec { name: name.into(), stages }
    }

    /// Stage list, one per line.
    pub fn body_text(&self) -> String {
        self.stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("\n")
    }

    /// Visit every statement, including nested ones.
    pub fn statements(&self) -> Vec<&Stmt> {
        fn walk<'a>(stmts: &'a [Stmt], out: &mut Vec<&'a Stmt>) {
            for s in stmts {
                out.push(s);
                if let Stmt::If { then, otherwise, .. } = s {
                    walk(then, out);
                    if let Some(o) = otherwise {
                        walk(o, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        for stage in &self.stages {
            if let Stage::Expr(stmts) = stage {
                walk(stmts, &mut out);
            }
        }
        out
    }

    /// Topics this pipeline may publish to.
    pub fn output_topics(&self) -> Vec<TopicName> {
        let mut out: Vec<TopicName> = self
            .stages
            .iter()
            .filter_map(|s| match s {
                Stage::Relay(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        for s in self.statements() {
            match s {
                Stmt::Forward(t) => out.push(t.clone()),
                Stmt::Emit(e) => out.push(e.topic.clone()),
                _ => {}
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn has_emit(&self) -> bool {
        self.statements().iter().any(|s| matches!(s, Stmt::Emit(_)))
    }
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pipeline {} {{", self.name)?;
        for stage in &self.stages {
            writeln!(f, "  {stage}")?;
        }
        f.write_str("}")
    }
}
