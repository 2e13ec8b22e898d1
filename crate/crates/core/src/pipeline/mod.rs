//! Handler pipelines: a small line-oriented language of transform
//! stages, its evaluator, and the shared parameter store.

mod ast;
mod eval;
mod params;
mod parse;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;

pub use ast::{BinOp, Emit, Expr, Func, MessageLiteral, PipelineSpec, Stage, Stmt};
pub use eval::{
    build_literal, check_pipeline, emit_program, eval_pipeline, EvalContext, EvalError, Forward, InputKind, Outcome,
    Payload,
};
pub use params::{InvalidIdentifier, ParamStore};
pub use parse::{parse_expr, parse_literal, parse_pipeline, parse_pipeline_def, ParseError, ParseErrorKind};

/// Named pipelines. Definitions are immutable once stored; redefining a
/// name installs a new version that handlers pick up on their next
/// message.
#[derive(Default)]
pub struct PipelineLibrary {
    entries: RwLock<BTreeMap<String, Arc<PipelineSpec>>>,
}

impl PipelineLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn define(&self, spec: PipelineSpec) -> Arc<PipelineSpec> {
        let spec = Arc::new(spec);
        self.entries.write().insert(spec.name.clone(), spec.clone());
        spec
    }

    pub fn get(&self, name: &str) -> Option<Arc<PipelineSpec>> {
        self.entries.read().get(name).cloned()
    }

    pub fn remove(&self, name: &str) -> Option<Arc<PipelineSpec>> {
        self.entries.write().remove(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.read().keys().cloned().collect()
    }

    pub fn all(&self) -> Vec<Arc<PipelineSpec>> {
        self.entries.read().values().cloned().collect()
    }
}
