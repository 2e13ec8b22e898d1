use std::sync::Arc;

use super::ast::{BinOp, Expr, Func, MessageLiteral, PipelineSpec, Stage, Stmt};
use super::params::ParamStore;
use crate::bus::TopicName;
use crate::schema::{render_message, FieldPath, Layout, MessageValue, RawPayload, SchemaRegistry, Shape};

/// A message as seen by a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Typed(MessageValue),
    Raw(RawPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub topic: TopicName,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub forwards: Vec<Forward>,
    pub logs: Vec<String>,
    /// A `drop` or failed `gate` discarded the message.
    pub dropped: bool,
    /// The working copy after the last stage; `None` when dropped or
    /// when there was no input.
    pub result: Option<Payload>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("stage type error: {0}")]
    StageType(String),
    #[error("bad field path: {0}")]
    BadPath(String),
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("pipeline `{0}` has no emit statement")]
    NoEmit(String),
}

/// What evaluation may read besides the message itself.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub params: &'a ParamStore,
    pub schemas: &'a SchemaRegistry,
}

enum Working {
    Typed(MessageValue, Arc<Layout>),
    Raw(RawPayload),
    Nothing,
}

#[derive(Clone, Copy)]
enum Val {
    Num(f64),
    Bool(bool),
}

impl Val {
    fn num(self) -> f64 {
        match self {
            Val::Num(v) => v,
            Val::Bool(b) => b as u8 as f64,
        }
    }

    fn truth(self) -> bool {
        match self {
            Val::Num(v) => v != 0.0 && !v.is_nan(),
            Val::Bool(b) => b,
        }
    }
}

enum Flow {
    Continue,
    Dropped,
}

struct Run<'a> {
    ctx: EvalContext<'a>,
    working: Working,
    out: Outcome,
}

impl<'a> Run<'a> {
    fn layout(&self, schema: &str) -> Result<Arc<Layout>, EvalError> {
        self.ctx.schemas.layout(schema).ok_or_else(|| EvalError::UnknownSchema(schema.to_string()))
    }

    fn typed(&mut self, what: &str) -> Result<(&mut MessageValue, &Arc<Layout>), EvalError> {
        match &mut self.working {
            Working::Typed(m, l) => Ok((m, l)),
            Working::Raw(_) => Err(EvalError::StageType(format!("{what} needs a decoded message, input is raw"))),
            Working::Nothing => Err(EvalError::StageType(format!("{what} needs an input message"))),
        }
    }

    fn read_field(&mut self, path: &FieldPath) -> Result<f64, EvalError> {
        let (m, l) = self.typed("field access")?;
        let resolved = l.resolve(path).map_err(|e| EvalError::BadPath(e.to_string()))?;
        m.get(&resolved)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| EvalError::BadPath(format!("`{path}` is not a readable number in this message")))
    }

    fn write_field(&mut self, path: &FieldPath, v: f64) -> Result<(), EvalError> {
        let (m, l) = self.typed("assignment")?;
        let resolved = l.resolve(path).map_err(|e| EvalError::BadPath(e.to_string()))?;
        if m.get_mut(&resolved).is_some_and(|slot| slot.assign_f64(v)) {
            Ok(())
        } else {
            Err(EvalError::BadPath(format!("`{path}` is not an assignable number in this message")))
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<Val, EvalError> {
        Ok(match e {
            Expr::Num(v) => Val::Num(*v),
            Expr::Bool(b) => Val::Bool(*b),
            Expr::Field(p) => Val::Num(self.read_field(p)?),
            Expr::Param(name) => Val::Num(self.ctx.params.read(name)),
            Expr::Call(f, args) => {
                let a = self.eval(&args[0])?.num();
                match f {
                    Func::Abs => Val::Num(a.abs()),
                    Func::Sqrt => Val::Num(a.sqrt()),
                    Func::Min => Val::Num(a.min(self.eval(&args[1])?.num())),
                    Func::Max => Val::Num(a.max(self.eval(&args[1])?.num())),
                }
            }
            Expr::Not(e) => Val::Bool(!self.eval(e)?.truth()),
            Expr::Neg(e) => Val::Num(-self.eval(e)?.num()),
            Expr::Binary(op, a, b) => {
                let x = self.eval(a)?;
                match op {
                    BinOp::And => return Ok(Val::Bool(x.truth() && self.eval(b)?.truth())),
                    BinOp::Or => return Ok(Val::Bool(x.truth() || self.eval(b)?.truth())),
                    _ => {}
                }
                let (x, y) = (x.num(), self.eval(b)?.num());
                match op {
                    BinOp::Eq => Val::Bool(x == y),
                    BinOp::Ne => Val::Bool(x != y),
                    BinOp::Lt => Val::Bool(x < y),
                    BinOp::Le => Val::Bool(x <= y),
                    BinOp::Gt => Val::Bool(x > y),
                    BinOp::Ge => Val::Bool(x >= y),
                    BinOp::Add => Val::Num(x + y),
                    BinOp::Sub => Val::Num(x - y),
                    BinOp::Mul => Val::Num(x * y),
                    BinOp::Div => Val::Num(x / y),
                    BinOp::And | BinOp::Or => unreachable!(),
                }
            }
        })
    }

    fn forward_copy(&mut self, topic: &TopicName) -> Result<(), EvalError> {
        let payload = match &self.working {
            Working::Typed(m, _) => Payload::Typed(m.clone()),
            Working::Raw(r) => Payload::Raw(r.clone()),
            Working::Nothing => return Err(EvalError::StageType("nothing to forward without an input".into())),
        };
        self.out.forwards.push(Forward { topic: topic.clone(), payload });
        Ok(())
    }

    fn build(&mut self, lit: &MessageLiteral) -> Result<MessageValue, EvalError> {
        let layout = self.layout(&lit.schema)?;
        let mut msg = layout.zero_message();
        for (path, e) in &lit.fields {
            let v = self.eval(e)?.num();
            let resolved = layout.resolve(path).map_err(|e| EvalError::BadPath(e.to_string()))?;
            if !msg.get_mut(&resolved).is_some_and(|slot| slot.assign_f64(v)) {
                return Err(EvalError::BadPath(format!("`{path}` is not a numeric field of {}", lit.schema)));
            }
        }
        Ok(msg)
    }

    fn stmts(&mut self, stmts: &[Stmt]) -> Result<Flow, EvalError> {
        for s in stmts {
            let flow = match s {
                Stmt::If { cond, then, otherwise } => {
                    if self.eval(cond)?.truth() {
                        self.stmts(then)?
                    } else if let Some(o) = otherwise {
                        self.stmts(o)?
                    } else {
                        Flow::Continue
                    }
                }
                Stmt::Assign(path, e) => {
                    let v = self.eval(e)?.num();
                    self.write_field(path, v)?;
                    Flow::Continue
                }
                Stmt::Drop => Flow::Dropped,
                Stmt::Forward(t) => {
                    self.forward_copy(t)?;
                    Flow::Continue
                }
                Stmt::Emit(emit) => {
                    let msg = self.build(&emit.message)?;
                    self.out.forwards.push(Forward { topic: emit.topic.clone(), payload: Payload::Typed(msg) });
                    Flow::Continue
                }
            };
            if let Flow::Dropped = flow {
                return Ok(Flow::Dropped);
            }
        }
        Ok(Flow::Continue)
    }

    fn stage(&mut self, stage: &Stage) -> Result<Flow, EvalError> {
        match stage {
            Stage::Relay(t) => self.forward_copy(t)?,
            Stage::Clamp { path, min, max } => {
                let v = self.read_field(path)?;
                self.write_field(path, v.max(*min).min(*max))?;
            }
            Stage::Scale { path, factor } => {
                let v = self.read_field(path)?;
                self.write_field(path, v * factor)?;
            }
            Stage::Gate(e) => {
                if !self.eval(e)?.truth() {
                    return Ok(Flow::Dropped);
                }
            }
            Stage::Drop => return Ok(Flow::Dropped),
            Stage::Log(label) => {
                let text = match &self.working {
                    Working::Typed(m, l) => render_message(l, m),
                    Working::Raw(r) => format!("<{} raw bytes>", r.bytes.len()),
                    Working::Nothing => "<tick>".to_string(),
                };
                self.out.logs.push(format!("{label}: {text}"));
            }
            Stage::Expr(stmts) => return self.stmts(stmts),
        }
        Ok(Flow::Continue)
    }

    fn run(mut self, spec: &PipelineSpec) -> Result<Outcome, EvalError> {
        for stage in &spec.stages {
            if let Flow::Dropped = self.stage(stage)? {
                self.out.forwards.clear();
                self.out.dropped = true;
                break;
            }
        }
        if !self.out.dropped {
            self.out.result = match self.working {
                Working::Typed(m, _) => Some(Payload::Typed(m)),
                Working::Raw(r) => Some(Payload::Raw(r)),
                Working::Nothing => None,
            };
        }
        Ok(self.out)
    }
}

/// Run `spec` over one message. Stages work on a private copy of the
/// input; parameters are read at each reference.
pub fn eval_pipeline(spec: &PipelineSpec, input: Payload, ctx: EvalContext<'_>) -> Result<Outcome, EvalError> {
    let working = match input {
        Payload::Typed(m) => {
            let layout = ctx.schemas.layout(&m.schema).ok_or_else(|| EvalError::UnknownSchema(m.schema.clone()))?;
            Working::Typed(m, layout)
        }
        Payload::Raw(r) => Working::Raw(r),
    };
    Run { ctx, working, out: Outcome::default() }.run(spec)
}

/// Run a pipeline with no input message, as a timer does.
pub fn emit_program(spec: &PipelineSpec, ctx: EvalContext<'_>) -> Result<Outcome, EvalError> {
    if !spec.has_emit() {
        return Err(EvalError::NoEmit(spec.name.clone()));
    }
    Run { ctx, working: Working::Nothing, out: Outcome::default() }.run(spec)
}

/// Build a message from a constructor literal; `msg.` references are
/// not available.
pub fn build_literal(lit: &MessageLiteral, ctx: EvalContext<'_>) -> Result<MessageValue, EvalError> {
    Run { ctx, working: Working::Nothing, out: Outcome::default() }.build(lit)
}

/// What a pipeline will be fed.
#[derive(Clone, Copy)]
pub enum InputKind<'a> {
    Typed(&'a Layout),
    Raw,
    Timer,
}

fn check_numeric(layout: &Layout, path: &FieldPath) -> Result<(), EvalError> {
    let r = layout.resolve(path).map_err(|e| EvalError::BadPath(e.to_string()))?;
    match r.leaf {
        Shape::Scalar(s) if s.is_numeric() || s == crate::schema::ScalarType::Bool => Ok(()),
        _ => Err(EvalError::BadPath(format!("`{path}` in {} is not numeric", layout.name))),
    }
}

fn check_expr(e: &Expr, input: InputKind<'_>) -> Result<(), EvalError> {
    match e {
        Expr::Field(p) => match input {
            InputKind::Typed(l) => check_numeric(l, p),
            InputKind::Raw => Err(EvalError::StageType(format!("msg.{p} read from a raw input"))),
            InputKind::Timer => Err(EvalError::StageType(format!("msg.{p} read in a timer pipeline"))),
        },
        Expr::Num(_) | Expr::Bool(_) | Expr::Param(_) => Ok(()),
        Expr::Call(_, args) => args.iter().try_for_each(|a| check_expr(a, input)),
        Expr::Not(e) | Expr::Neg(e) => check_expr(e, input),
        Expr::Binary(_, a, b) => check_expr(a, input).and_then(|_| check_expr(b, input)),
    }
}

fn check_stmts(stmts: &[Stmt], input: InputKind<'_>, schemas: &SchemaRegistry) -> Result<(), EvalError> {
    for s in stmts {
        match s {
            Stmt::If { cond, then, otherwise } => {
                check_expr(cond, input)?;
                check_stmts(then, input, schemas)?;
                if let Some(o) = otherwise {
                    check_stmts(o, input, schemas)?;
                }
            }
            Stmt::Assign(p, e) => {
                check_expr(e, input)?;
                match input {
                    InputKind::Typed(l) => check_numeric(l, p)?,
                    _ => return Err(EvalError::StageType(format!("assignment to msg.{p} without a decoded input"))),
                }
            }
            Stmt::Drop => {}
            Stmt::Forward(_) => {
                if let InputKind::Timer = input {
                    return Err(EvalError::StageType("forward in a timer pipeline has no message".into()));
                }
            }
            Stmt::Emit(emit) => {
                let layout = schemas
                    .layout(&emit.message.schema)
                    .ok_or_else(|| EvalError::UnknownSchema(emit.message.schema.clone()))?;
                for (p, e) in &emit.message.fields {
                    check_numeric(&layout, p)?;
                    check_expr(e, input)?;
                }
            }
        }
    }
    Ok(())
}

/// Install-time validation: field paths resolve to numbers, schemas
/// exist, and raw or timer inputs never reach stages that need a
/// decoded message.
pub fn check_pipeline(spec: &PipelineSpec, input: InputKind<'_>, schemas: &SchemaRegistry) -> Result<(), EvalError> {
    if let InputKind::Timer = input {
        if !spec.has_emit() {
            return Err(EvalError::NoEmit(spec.name.clone()));
        }
    }
    for stage in &spec.stages {
        match (stage, input) {
            (Stage::Drop | Stage::Log(_), _) => {}
            (Stage::Relay(_), InputKind::Timer) => {
                return Err(EvalError::StageType("relay in a timer pipeline has no message".into()))
            }
            (Stage::Relay(_), _) => {}
            (Stage::Clamp { path, .. } | Stage::Scale { path, .. }, InputKind::Typed(l)) => check_numeric(l, path)?,
            (Stage::Clamp { .. } | Stage::Scale { .. }, _) => {
                return Err(EvalError::StageType(format!("`{stage}` needs a decoded message")))
            }
            (Stage::Gate(_) | Stage::Expr(_), InputKind::Raw) => {
                return Err(EvalError::StageType(format!("`{stage}` cannot run on a raw input")))
            }
            (Stage::Gate(e), _) => check_expr(e, input)?,
            (Stage::Expr(stmts), _) => check_stmts(stmts, input, schemas)?,
        }
    }
    Ok(())
}
