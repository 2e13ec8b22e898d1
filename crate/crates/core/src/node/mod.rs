//! Nodes: declarative specs, the fluent builder, and running nodes that
//! keep their broker endpoints in step with their spec.

mod runtime;
mod spec;
mod timer;

pub use runtime::{time_scale_from_env, HostContext, HostHandler, NodeState, NodeStats, RunningNode, Runtime, WrapMode, TIME_SCALE_ENV};
pub use spec::{BaseRef, Direction, Endpoint, EndpointGroup, EndpointId, EndpointSet, Endpoints, NodeSpec, Replace, Timer};
pub use timer::Ticker;

use crate::bus::BusError;
use crate::launcher::LaunchError;
use crate::pipeline::EvalError;
use crate::wrap::WrapError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NodeError {
    #[error("`{0}` is not a valid identifier")]
    InvalidIdentifier(String),
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("duplicate endpoint: {0}")]
    DuplicateEndpoint(String),
    #[error("schema conflict: {0}")]
    SchemaConflict(String),
    #[error("no such endpoint: {0}")]
    NoSuchEndpoint(String),
    #[error("no timer {0}")]
    NoSuchTimer(u32),
    #[error("timer period must be positive, got {0}")]
    NonPositivePeriod(f64),
    #[error("replace entries need a base node")]
    ReplaceWithoutBase,
    #[error("{0}")]
    Invalid(String),
    #[error("unknown pipeline `{0}`")]
    UnknownPipeline(String),
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("`{0}` is not published by this node")]
    NotPublished(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("node `{0}` is stopped")]
    Stopped(String),
    #[error(transparent)]
    Pipeline(#[from] EvalError),
    #[error(transparent)]
    Bus(BusError),
    #[error(transparent)]
    Wrap(#[from] WrapError),
    #[error(transparent)]
    Launch(#[from] LaunchError),
}

impl From<BusError> for NodeError {
    fn from(e: BusError) -> Self {
        match e {
            BusError::SchemaConflict(m) => NodeError::SchemaConflict(m),
            BusError::ShapeMismatch(m) => NodeError::ShapeMismatch(m),
            other => NodeError::Bus(other),
        }
    }
}
