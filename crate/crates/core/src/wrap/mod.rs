//! Interception planning: turn a node spec with a base into the alias
//! table and relay endpoints that put the wrapper between the base and
//! the rest of the graph.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bus::TopicName;
use crate::node::{Direction, NodeSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WrapError {
    #[error("overlapping endpoint sets: {0}")]
    OverlappingSets(String),
    #[error("node `{0}` has reuse or replace entries but no base node")]
    MissingBase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelayKind {
    /// External topic into the base.
    ReuseIn,
    /// Base output back out to its external name.
    ReuseOut,
    /// Base output redirected to a different external topic.
    Replace,
}

impl fmt::Display for RelayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelayKind::ReuseIn => "reuse-in",
            RelayKind::ReuseOut => "reuse-out",
            RelayKind::Replace => "replace",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relay {
    pub kind: RelayKind,
    pub source: TopicName,
    pub target: TopicName,
    /// `None` relays bytes unchanged.
    pub pipeline: Option<String>,
    pub schema: Option<String>,
}

/// The wiring that realizes a wrapper. `aliases` maps each intercepted
/// external topic of the base to the wrapper-owned internal name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapPlan {
    pub wrapper: String,
    pub base: Option<String>,
    pub aliases: BTreeMap<TopicName, TopicName>,
    pub relays: Vec<Relay>,
}

impl WrapPlan {
    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty() && self.relays.is_empty()
    }
}

/// Compute the plan for `spec`. Pure; nothing touches the broker.
pub fn plan_wrap(spec: &NodeSpec) -> Result<WrapPlan, WrapError> {
    let w = spec.name.as_str();
    let mut plan = WrapPlan { wrapper: w.to_string(), base: spec.base.as_ref().map(|b| b.node.clone()), ..Default::default() };
    if spec.reuse.is_empty() && spec.replace.is_empty() {
        return Ok(plan);
    }
    if spec.base.is_none() {
        return Err(WrapError::MissingBase(w.to_string()));
    }
    for t in spec.reuse.publish.keys() {
        if spec.reuse.subscribe.contains_key(t) {
            return Err(WrapError::OverlappingSets(format!("{t} is reused in both directions")));
        }
    }
    for t in spec.replace.keys() {
        if spec.reuse.publish.contains_key(t) || spec.reuse.subscribe.contains_key(t) {
            return Err(WrapError::OverlappingSets(format!("{t} is both reused and replaced")));
        }
    }
    for direction in [Direction::Publish, Direction::Subscribe] {
        for (t, e) in spec.reuse.get(direction) {
            let internal = t.wrapped_under(w);
            plan.aliases.insert(t.clone(), internal.clone());
            let (kind, source, target) = match direction {
                Direction::Publish => (RelayKind::ReuseOut, internal, t.clone()),
                Direction::Subscribe => (RelayKind::ReuseIn, t.clone(), internal),
            };
            plan.relays.push(Relay { kind, source, target, pipeline: e.pipeline.clone(), schema: e.schema.clone() });
        }
    }
    for (from, r) in &spec.replace {
        let internal = from.wrapped_under(w);
        plan.aliases.insert(from.clone(), internal.clone());
        plan.relays.push(Relay {
            kind: RelayKind::Replace,
            source: internal,
            target: r.to.clone(),
            pipeline: Some(r.pipeline.clone()),
            schema: r.schema.clone(),
        });
    }
    plan.relays.sort();
    Ok(plan)
}
