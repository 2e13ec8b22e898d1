use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::TopicName;

/// Identity of the message a relayed envelope was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub node: String,
    pub seq: u64,
    pub timestamp: u64,
}

/// One published message as routed by the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    /// Topic the message was routed on (after alias resolution).
    pub topic: TopicName,
    /// Schema name, `None` for raw payloads.
    pub schema: Option<String>,
    pub publisher: String,
    pub seq: u64,
    /// Nanoseconds since broker start.
    pub timestamp: u64,
    pub payload: Bytes,
    pub origin: Option<Origin>,
}

impl Envelope {
    /// The first publisher in a relay chain: the carried origin when
    /// present, otherwise this envelope's own publisher and sequence.
    pub fn root_origin(&self) -> Origin {
        self.origin.clone().unwrap_or_else(|| Origin {
            node: self.publisher.clone(),
            seq: self.seq,
            timestamp: self.timestamp,
        })
    }
}
