//! The message bus: a single broker owning the topic registry, per-node
//! alias tables and routing, reachable over TCP or in-process.

mod broker;
mod client;
mod envelope;
mod queue;
mod server;
mod snapshot;
mod topic;
pub mod wire;

pub use broker::{Broker, Caller, DeliverySink, SessionClock, SessionId};
pub use client::{Client, Connector, Delivery, Handler, PublicationHandle, SubscriptionHandle, DEFAULT_BROKER_PORT};
pub use envelope::{Envelope, Origin};
pub use queue::{DropQueue, Pop, DEFAULT_QUEUE_CAPACITY};
pub use server::{BrokerServer, KEEPALIVE_INTERVAL, KEEPALIVE_TIMEOUT};
pub use snapshot::{AliasEntry, EndpointEntry, GraphSnapshot, NodeEntry, TopicEntry};
pub use topic::{TopicName, WRAP_PREFIX};

/// Environment variable overriding the broker address for all clients.
pub const BROKER_URI_ENV: &str = "NW_BROKER_URI";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("invalid topic name `{0}`")]
    InvalidTopic(String),
    #[error("schema conflict: {0}")]
    SchemaConflict(String),
    #[error("stale handle {0}")]
    StaleHandle(String),
    #[error("no such node `{0}`")]
    NoSuchNode(String),
    #[error("alias collision: {0}")]
    AliasCollision(String),
    #[error("reserved prefix: {0}")]
    ReservedPrefix(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("node name `{0}` is already in use")]
    NameInUse(String),
    #[error("invalid node name `{0}`")]
    InvalidName(String),
    #[error("session not established: {0}")]
    NotAuthenticated(String),
    #[error("payload does not match schema: {0}")]
    ShapeMismatch(String),
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("disconnected from broker")]
    Disconnected,
}

impl BusError {
    /// Code carried in an `ERROR` frame.
    pub fn code(&self) -> u16 {
        match self {
            BusError::InvalidTopic(_) => 1,
            BusError::SchemaConflict(_) => 2,
            BusError::StaleHandle(_) => 3,
            BusError::NoSuchNode(_) => 4,
            BusError::AliasCollision(_) => 5,
            BusError::ReservedPrefix(_) => 6,
            BusError::PermissionDenied(_) => 7,
            BusError::NameInUse(_) => 8,
            BusError::InvalidName(_) => 9,
            BusError::NotAuthenticated(_) => 10,
            BusError::ShapeMismatch(_) => 11,
            BusError::UnknownSchema(_) => 12,
            BusError::Protocol(_) => 13,
            BusError::BrokerUnreachable(_) => 14,
            BusError::Disconnected => 15,
        }
    }

    /// The message part, without the variant's prefix.
    pub fn detail(&self) -> String {
        match self {
            BusError::InvalidTopic(s)
            | BusError::SchemaConflict(s)
            | BusError::StaleHandle(s)
            | BusError::NoSuchNode(s)
            | BusError::AliasCollision(s)
            | BusError::ReservedPrefix(s)
            | BusError::PermissionDenied(s)
            | BusError::NameInUse(s)
            | BusError::InvalidName(s)
            | BusError::NotAuthenticated(s)
            | BusError::ShapeMismatch(s)
            | BusError::UnknownSchema(s)
            | BusError::Protocol(s)
            | BusError::BrokerUnreachable(s) => s.clone(),
            BusError::Disconnected => String::new(),
        }
    }

    pub fn from_code(code: u16, message: String) -> BusError {
        match code & !wire::ASYNC_ERROR_FLAG {
            1 => BusError::InvalidTopic(message),
            2 => BusError::SchemaConflict(message),
            3 => BusError::StaleHandle(message),
            4 => BusError::NoSuchNode(message),
            5 => BusError::AliasCollision(message),
            6 => BusError::ReservedPrefix(message),
            7 => BusError::PermissionDenied(message),
            8 => BusError::NameInUse(message),
            9 => BusError::InvalidName(message),
            10 => BusError::NotAuthenticated(message),
            11 => BusError::ShapeMismatch(message),
            12 => BusError::UnknownSchema(message),
            14 => BusError::BrokerUnreachable(message),
            15 => BusError::Disconnected,
            _ => BusError::Protocol(message),
        }
    }
}
