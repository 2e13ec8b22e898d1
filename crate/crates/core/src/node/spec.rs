use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::NodeError;
use crate::bus::TopicName;
use crate::schema::is_identifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Publish,
    Subscribe,
}

/// Which of a node's two endpoint sets an endpoint belongs to: `reuse`
/// re-exports a base node's topic, `new` adds one of the wrapper's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointSet {
    Reuse,
    New,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Publish => "publish",
            Direction::Subscribe => "subscribe",
        })
    }
}

impl fmt::Display for EndpointSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndpointSet::Reuse => "reuse",
            EndpointSet::New => "new",
        })
    }
}

/// Stable identity of an endpoint; re-declaring the same endpoint keeps it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointId {
    pub set: EndpointSet,
    pub direction: Direction,
    pub topic: TopicName,
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.set, self.direction, self.topic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseRef {
    pub package: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    /// Schema name; `None` carries raw bytes.
    #[serde(rename = "type")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replace {
    pub to: TopicName,
    pub pipeline: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timer {
    /// Seconds between ticks.
    pub period: f64,
    pub pipeline: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointGroup {
    #[serde(default)]
    pub publish: BTreeMap<TopicName, Endpoint>,
    #[serde(default)]
    pub subscribe: BTreeMap<TopicName, Endpoint>,
}

impl EndpointGroup {
    pub fn get(&self, direction: Direction) -> &BTreeMap<TopicName, Endpoint> {
        match direction {
            Direction::Publish => &self.publish,
            Direction::Subscribe => &self.subscribe,
        }
    }

    fn get_mut(&mut self, direction: Direction) -> &mut BTreeMap<TopicName, Endpoint> {
        match direction {
            Direction::Publish => &mut self.publish,
            Direction::Subscribe => &mut self.subscribe,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.publish.is_empty() && self.subscribe.is_empty()
    }
}

/// Declarative description of a node. Every collection is keyed, so
/// declaration order never matters and equal specs compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseRef>,
    #[serde(default, skip_serializing_if = "EndpointGroup::is_empty")]
    pub reuse: EndpointGroup,
    #[serde(default, skip_serializing_if = "EndpointGroup::is_empty", rename = "new")]
    pub new_set: EndpointGroup,
    /// Base topic → replacement.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub replace: BTreeMap<TopicName, Replace>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timers: BTreeMap<u32, Timer>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

fn topic(text: &str) -> Result<TopicName, NodeError> {
    let t = TopicName::parse(text).map_err(|_| NodeError::InvalidTopic(text.to_string()))?;
    if t.is_reserved() {
        return Err(NodeError::InvalidTopic(format!("{t} is in the reserved wrap namespace")));
    }
    Ok(t)
}

fn ident(text: &str) -> Result<String, NodeError> {
    if is_identifier(text) {
        Ok(text.to_string())
    } else {
        Err(NodeError::InvalidIdentifier(text.to_string()))
    }
}

impl NodeSpec {
    pub fn new(name: &str) -> Result<NodeSpec, NodeError> {
        Ok(NodeSpec {
            name: ident(name)?,
            base: None,
            reuse: EndpointGroup::default(),
            new_set: EndpointGroup::default(),
            replace: BTreeMap::new(),
            timers: BTreeMap::new(),
            params: BTreeMap::new(),
        })
    }

    pub fn base_package(&mut self, package: &str) -> Result<&mut Self, NodeError> {
        let package = ident(package)?;
        let node = self.base.as_ref().map(|b| b.node.clone()).unwrap_or_default();
        self.base = Some(BaseRef { package, node });
        Ok(self)
    }

    pub fn base_node(&mut self, node: &str) -> Result<&mut Self, NodeError> {
        let node = ident(node)?;
        let package = self.base.as_ref().map(|b| b.package.clone()).unwrap_or_default();
        self.base = Some(BaseRef { package, node });
        Ok(self)
    }

    pub fn set_base(&mut self, package: &str, node: &str) -> Result<&mut Self, NodeError> {
        self.base = Some(BaseRef { package: ident(package)?, node: ident(node)? });
        Ok(self)
    }

    /// Builder for the `reuse` set.
    pub fn reuse(&mut self) -> Endpoints<'_> {
        Endpoints { spec: self, set: EndpointSet::Reuse }
    }

    /// Builder for the `new` set.
    pub fn new_endpoints(&mut self) -> Endpoints<'_> {
        Endpoints { spec: self, set: EndpointSet::New }
    }

    pub fn group(&self, set: EndpointSet) -> &EndpointGroup {
        match set {
            EndpointSet::Reuse => &self.reuse,
            EndpointSet::New => &self.new_set,
        }
    }

    fn group_mut(&mut self, set: EndpointSet) -> &mut EndpointGroup {
        match set {
            EndpointSet::Reuse => &mut self.reuse,
            EndpointSet::New => &mut self.new_set,
        }
    }

    /// Declare an endpoint. Declaring an existing one with the same schema
    /// replaces its pipeline and keeps its id; a different schema is an
    /// error.
    pub fn add_endpoint(
        &mut self,
        set: EndpointSet,
        direction: Direction,
        topic_text: &str,
        schema: Option<&str>,
        pipeline: Option<&str>,
    ) -> Result<EndpointId, NodeError> {
        let t = topic(topic_text)?;
        let schema = schema.map(ident).transpose()?;
        let pipeline = pipeline.map(ident).transpose()?;
        if set == EndpointSet::New && direction == Direction::Publish && pipeline.is_some() {
            return Err(NodeError::Invalid("new publications take no pipeline".into()));
        }
        let other = match set {
            EndpointSet::Reuse => EndpointSet::New,
            EndpointSet::New => EndpointSet::Reuse,
        };
        if self.group(other).get(direction).contains_key(&t) {
            return Err(NodeError::DuplicateEndpoint(format!("{direction} {t} is already declared in the {other} set")));
        }
        let slot = self.group_mut(set).get_mut(direction);
        if let Some(existing) = slot.get(&t) {
            if existing.schema != schema {
                return Err(NodeError::SchemaConflict(format!(
                    "{set} {direction} {t} is declared as {}, not {}",
                    existing.schema.as_deref().unwrap_or("raw"),
                    schema.as_deref().unwrap_or("raw")
                )));
            }
        }
        slot.insert(t.clone(), Endpoint { schema, pipeline });
        Ok(EndpointId { set, direction, topic: t })
    }

    pub fn remove_endpoint(&mut self, set: EndpointSet, direction: Direction, topic_text: &str) -> Result<(), NodeError> {
        let t = TopicName::parse(topic_text).map_err(|_| NodeError::InvalidTopic(topic_text.to_string()))?;
        self.group_mut(set)
            .get_mut(direction)
            .remove(&t)
            .map(|_| ())
            .ok_or_else(|| NodeError::NoSuchEndpoint(format!("{set} {direction} {t}")))
    }

    pub fn add_replace(
        &mut self,
        from: &str,
        to: &str,
        pipeline: &str,
        schema: Option<&str>,
    ) -> Result<&mut Self, NodeError> {
        let from = topic(from)?;
        let to = topic(to)?;
        let schema = schema.map(ident).transpose()?;
        self.replace.insert(from, Replace { to, pipeline: ident(pipeline)?, schema });
        Ok(self)
    }

    pub fn remove_replace(&mut self, from: &str) -> Result<(), NodeError> {
        let t = TopicName::parse(from).map_err(|_| NodeError::InvalidTopic(from.to_string()))?;
        self.replace.remove(&t).map(|_| ()).ok_or_else(|| NodeError::NoSuchEndpoint(format!("replace {t}")))
    }

    /// Add a periodic emitter; returns its id.
    pub fn add_timer(&mut self, period: f64, pipeline: &str) -> Result<u32, NodeError> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(NodeError::NonPositivePeriod(period));
        }
        let id = self.timers.keys().next_back().map_or(1, |k| k + 1);
        self.timers.insert(id, Timer { period, pipeline: ident(pipeline)? });
        Ok(id)
    }

    pub fn remove_timer(&mut self, id: u32) -> Result<(), NodeError> {
        self.timers.remove(&id).map(|_| ()).ok_or(NodeError::NoSuchTimer(id))
    }

    pub fn set_param(&mut self, name: &str, value: f64) -> Result<&mut Self, NodeError> {
        self.params.insert(ident(name)?, value);
        Ok(self)
    }

    /// Every endpoint in canonical order.
    pub fn endpoints(&self) -> Vec<(EndpointId, &Endpoint)> {
        let mut out = Vec::new();
        for set in [EndpointSet::Reuse, EndpointSet::New] {
            for direction in [Direction::Publish, Direction::Subscribe] {
                for (t, e) in self.group(set).get(direction) {
                    out.push((EndpointId { set, direction, topic: t.clone() }, e));
                }
            }
        }
        out
    }

    /// Pipelines the spec refers to.
    pub fn pipeline_refs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .endpoints()
            .into_iter()
            .filter_map(|(_, e)| e.pipeline.as_deref())
            .chain(self.replace.values().map(|r| r.pipeline.as_str()))
            .chain(self.timers.values().map(|t| t.pipeline.as_str()))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Check the structural invariants that builder calls cannot enforce
    /// one at a time (specs may also arrive from model documents).
    pub fn validate(&self) -> Result<(), NodeError> {
        ident(&self.name)?;
        if let Some(b) = &self.base {
            ident(&b.package).map_err(|_| NodeError::Invalid(format!("base package `{}` is not set or invalid", b.package)))?;
            ident(&b.node).map_err(|_| NodeError::Invalid(format!("base node `{}` is not set or invalid", b.node)))?;
        } else if !self.replace.is_empty() {
            return Err(NodeError::ReplaceWithoutBase);
        } else if !self.reuse.is_empty() {
            return Err(NodeError::Invalid("reuse endpoints need a base node".into()));
        }
        for direction in [Direction::Publish, Direction::Subscribe] {
            for t in self.reuse.get(direction).keys() {
                if self.new_set.get(direction).contains_key(t) {
                    return Err(NodeError::DuplicateEndpoint(format!("{direction} {t} is in both sets")));
                }
            }
        }
        for (id, e) in self.endpoints() {
            if id.topic.is_reserved() {
                return Err(NodeError::InvalidTopic(id.topic.to_string()));
            }
            if let Some(s) = &e.schema {
                ident(s)?;
            }
            if id.set == EndpointSet::New && id.direction == Direction::Publish && e.pipeline.is_some() {
                return Err(NodeError::Invalid(format!("{id} has a pipeline but is a publication")));
            }
        }
        for (from, r) in &self.replace {
            if from.is_reserved() || r.to.is_reserved() {
                return Err(NodeError::InvalidTopic(format!("{from} as {}", r.to)));
            }
        }
        for (id, t) in &self.timers {
            if !(t.period > 0.0 && t.period.is_finite()) {
                return Err(NodeError::Invalid(format!("timer {id}: period {} is not positive", t.period)));
            }
        }
        for k in self.params.keys() {
            ident(k)?;
        }
        Ok(())
    }
}

/// Chained endpoint declarations for one set, mirroring
/// `node.new.subscribe(...).publish(...)`.
pub struct Endpoints<'a> {
    spec: &'a mut NodeSpec,
    set: EndpointSet,
}

impl<'a> Endpoints<'a> {
    pub fn publish(self, topic: &str, schema: &str) -> Result<Self, NodeError> {
        self.spec.add_endpoint(self.set, Direction::Publish, topic, Some(schema), None)?;
        Ok(self)
    }

    /// Untyped endpoint; messages pass through as bytes.
    pub fn publish_raw(self, topic: &str) -> Result<Self, NodeError> {
        self.spec.add_endpoint(self.set, Direction::Publish, topic, None, None)?;
        Ok(self)
    }

    pub fn subscribe_raw(self, topic: &str, pipeline: Option<&str>) -> Result<Self, NodeError> {
        self.spec.add_endpoint(self.set, Direction::Subscribe, topic, None, pipeline)?;
        Ok(self)
    }

    pub fn subscribe(self, topic: &str, schema: &str, pipeline: Option<&str>) -> Result<Self, NodeError> {
        self.spec.add_endpoint(self.set, Direction::Subscribe, topic, Some(schema), pipeline)?;
        Ok(self)
    }

    /// Back to the node for further chaining.
    pub fn done(self) -> &'a mut NodeSpec {
        self.spec
    }
}
