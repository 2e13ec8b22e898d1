use std::fmt;

use serde::{Deserialize, Serialize};

use super::BusError;

/// Prefix under which wrapping nodes keep their intercepted topics.
pub const WRAP_PREFIX: &str = "/__wrap/";

/// A normalized absolute topic name such as `/turtle1/cmd_vel`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicName(String);

impl TopicName {
    /// Parse a topic name. Relative names get a leading `/`.
    pub fn parse(text: &str) -> Result<TopicName, BusError> {
        let bad = || BusError::InvalidTopic(text.to_string());
        let body = text.strip_prefix('/').unwrap_or(text);
        if body.is_empty() {
            return Err(bad());
        }
        for seg in body.split('/') {
            if seg.is_empty() || !seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(bad());
            }
        }
        Ok(TopicName(format!("/{body}")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_reserved(&self) -> bool {
        self.0.starts_with(WRAP_PREFIX)
    }

    /// Whether this name lies in the wrap namespace owned by `node`.
    pub fn is_owned_by(&self, node: &str) -> bool {
        self.0
            .strip_prefix(WRAP_PREFIX)
            .and_then(|rest| rest.strip_prefix(node))
            .is_some_and(|rest| rest.starts_with('/'))
    }

    /// Name of the node owning this wrap-namespace topic, if any.
    pub fn wrap_owner(&self) -> Option<&str> {
        let rest = self.0.strip_prefix(WRAP_PREFIX)?;
        rest.split('/').next()
    }

    /// `/__wrap/<wrapper>/<external without leading slash>`.
    pub fn wrapped_under(&self, wrapper: &str) -> TopicName {
        TopicName(format!("{WRAP_PREFIX}{wrapper}{}", self.0))
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for TopicName {
    type Error = BusError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        TopicName::parse(&value)
    }
}

impl From<TopicName> for String {
    fn from(t: TopicName) -> String {
        t.0
    }
}

impl std::str::FromStr for TopicName {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicName::parse(s)
    }
}
