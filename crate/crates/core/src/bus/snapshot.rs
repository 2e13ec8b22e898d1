use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::TopicName;

/// Point-in-time view of the broker graph. All lists are sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub nodes: Vec<NodeEntry>,
    pub topics: Vec<TopicEntry>,
    pub aliases: Vec<AliasEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub name: String,
    pub pid: Option<u32>,
    pub publications: Vec<EndpointEntry>,
    pub subscriptions: Vec<EndpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EndpointEntry {
    /// Topic the endpoint is routed on.
    pub topic: TopicName,
    /// Topic the node asked for; differs from `topic` when aliased.
    pub requested: TopicName,
    pub schema: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub name: TopicName,
    pub schema: Option<String>,
    pub publishers: Vec<String>,
    pub subscribers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AliasEntry {
    pub node: String,
    pub external: TopicName,
    pub internal: TopicName,
}

impl GraphSnapshot {
    pub fn node(&self, name: &str) -> Option<&NodeEntry> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn topic(&self, name: &str) -> Option<&TopicEntry> {
        self.topics.iter().find(|t| t.name.as_str() == name)
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    pub fn topic_names(&self) -> Vec<&str> {
        self.topics.iter().map(|t| t.name.as_str()).collect()
    }

    /// Copy without process ids, for comparing graphs across runs.
    pub fn without_pids(&self) -> GraphSnapshot {
        let mut s = self.clone();
        for n in &mut s.nodes {
            n.pid = None;
        }
        s
    }

    /// Copy with the named nodes and everything only they touch removed.
    pub fn without_nodes(&self, names: &[&str]) -> GraphSnapshot {
        let mut s = self.clone();
        s.nodes.retain(|n| !names.contains(&n.name.as_str()));
        s.aliases.retain(|a| !names.contains(&a.node.as_str()));
        for t in &mut s.topics {
            t.publishers.retain(|p| !names.contains(&p.as_str()));
            t.subscribers.retain(|p| !names.contains(&p.as_str()));
        }
        s.topics.retain(|t| !t.publishers.is_empty() || !t.subscribers.is_empty());
        s
    }

    /// Check the snapshot's referential invariants.
    pub fn validate(&self) -> Result<(), String> {
        let topics: BTreeMap<&TopicName, &TopicEntry> = self.topics.iter().map(|t| (&t.name, t)).collect();
        if topics.len() != self.topics.len() {
            return Err("duplicate topic entries".into());
        }
        let names: BTreeSet<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        if names.len() != self.nodes.len() {
            return Err("duplicate node entries".into());
        }
        let mut alias_of: BTreeMap<(&str, &TopicName), &TopicName> = BTreeMap::new();
        for a in &self.aliases {
            if !names.contains(a.node.as_str()) {
                return Err(format!("alias for unknown node {}", a.node));
            }
            if !a.internal.is_reserved() {
                return Err(format!("alias target {} outside the wrap namespace", a.internal));
            }
            alias_of.insert((a.node.as_str(), &a.external), &a.internal);
        }
        let mut pubs: BTreeMap<&TopicName, BTreeSet<&str>> = BTreeMap::new();
        let mut subs: BTreeMap<&TopicName, BTreeSet<&str>> = BTreeMap::new();
        for n in &self.nodes {
            for (list, index) in [(&n.publications, &mut pubs), (&n.subscriptions, &mut subs)] {
                for ep in list {
                    let Some(t) = topics.get(&ep.topic) else {
                        return Err(format!("{} references missing topic {}", n.name, ep.topic));
                    };
                    let expected = alias_of.get(&(n.name.as_str(), &ep.requested)).copied().unwrap_or(&ep.requested);
                    if expected != &ep.topic {
                        return Err(format!("{} endpoint {} routed to {} not {}", n.name, ep.requested, ep.topic, expected));
                    }
                    if let (Some(a), Some(b)) = (&ep.schema, &t.schema) {
                        if a != b {
                            return Err(format!("schema mismatch on {}", ep.topic));
                        }
                    }
                    index.entry(&ep.topic).or_default().insert(&n.name);
                }
            }
        }
        for t in &self.topics {
            let p: BTreeSet<&str> = t.publishers.iter().map(String::as_str).collect();
            let s: BTreeSet<&str> = t.subscribers.iter().map(String::as_str).collect();
            if p != pubs.remove(&t.name).unwrap_or_default() {
                return Err(format!("publisher list of {} disagrees with nodes", t.name));
            }
            if s != subs.remove(&t.name).unwrap_or_default() {
                return Err(format!("subscriber list of {} disagrees with nodes", t.name));
            }
            if p.is_empty() && s.is_empty() {
                return Err(format!("topic {} has no endpoints", t.name));
            }
        }
        Ok(())
    }
}
