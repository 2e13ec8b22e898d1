use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};

use super::envelope::{Envelope, Origin};
use super::snapshot::{AliasEntry, EndpointEntry, GraphSnapshot, NodeEntry, TopicEntry};
use super::{BusError, TopicName};
use crate::schema::is_identifier;

pub type SessionId = u64;
type EndpointKey = (SessionId, u32);

/// Receives envelopes routed to one session.
pub trait DeliverySink: Send + Sync {
    /// `topic` is the name the subscriber asked for, which differs from
    /// `envelope.topic` when the subscriber's node is aliased.
    fn deliver(&self, handle: u32, topic: &TopicName, envelope: &Arc<Envelope>);

    /// Envelopes discarded because the subscriber fell behind.
    fn dropped(&self) -> u64 {
        0
    }
}

/// Who is asking for an alias change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Caller {
    /// In-process administrative access; bypasses namespace ownership.
    Admin,
    Session(SessionId),
}

/// Nanosecond clock shared by everything attached to one broker.
#[derive(Debug, Clone, Copy)]
pub struct SessionClock {
    start: Instant,
    epoch_ns: u64,
}

impl SessionClock {
    pub fn start_now() -> Self {
        let epoch_ns = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
        SessionClock { start: Instant::now(), epoch_ns }
    }

    /// Clock for a remote peer, given the broker's start in unix nanoseconds.
    pub fn from_epoch(epoch_ns: u64) -> Self {
        let now_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
        let elapsed = std::time::Duration::from_nanos(now_unix.saturating_sub(epoch_ns));
        let start = Instant::now().checked_sub(elapsed).unwrap_or_else(Instant::now);
        SessionClock { start, epoch_ns }
    }

    pub fn now_ns(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    pub fn epoch_ns(&self) -> u64 {
        self.epoch_ns
    }
}

struct Session {
    name: String,
    pid: Option<u32>,
    sink: Arc<dyn DeliverySink>,
    next_handle: u32,
    pubs_by_topic: HashMap<TopicName, u32>,
    subs_by_topic: HashMap<TopicName, u32>,
    seqs: HashMap<TopicName, Arc<Mutex<u64>>>,
}

struct Publication {
    requested: TopicName,
    effective: TopicName,
    schema: Option<String>,
    refs: u32,
    seq: Arc<Mutex<u64>>,
}

struct Subscription {
    requested: TopicName,
    effective: TopicName,
    schema: Option<String>,
    refs: u32,
    sink: Arc<dyn DeliverySink>,
}

#[derive(Default)]
struct TopicState {
    schema: Option<String>,
    publishers: BTreeSet<EndpointKey>,
    subscribers: BTreeSet<EndpointKey>,
}

#[derive(Default)]
struct State {
    next_session: SessionId,
    sessions: BTreeMap<SessionId, Session>,
    names: HashMap<String, SessionId>,
    pubs: BTreeMap<EndpointKey, Publication>,
    subs: BTreeMap<EndpointKey, Subscription>,
    topics: BTreeMap<TopicName, TopicState>,
    aliases: BTreeMap<String, BTreeMap<TopicName, TopicName>>,
}

struct Inner {
    state: RwLock<State>,
    clock: SessionClock,
}

/// The routing core: topic registry, subscription matching, per-node alias
/// tables and ordered delivery. Transport-agnostic; the TCP server and the
/// in-process client both drive it through sessions.
///
/// Routing-table mutations take the write lock; publishes share the read
/// lock, with a per-publisher sequence lock keeping each publisher's
/// stream in order.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

fn conflict(topic: &TopicName, existing: &str, requested: &str) -> BusError {
    BusError::SchemaConflict(format!("{topic} carries {existing}, not {requested}"))
}

impl State {
    fn resolve(&self, node: &str, requested: &TopicName) -> TopicName {
        self.aliases.get(node).and_then(|t| t.get(requested)).cloned().unwrap_or_else(|| requested.clone())
    }

    fn check_schema(&self, topic: &TopicName, schema: Option<&str>) -> Result<(), BusError> {
        if let (Some(s), Some(existing)) = (schema, self.topics.get(topic).and_then(|t| t.schema.as_deref())) {
            if s != existing {
                return Err(conflict(topic, existing, s));
            }
        }
        Ok(())
    }

    fn check_namespace(&self, session: &Session, topic: &TopicName) -> Result<(), BusError> {
        if topic.is_reserved() && !topic.is_owned_by(&session.name) {
            return Err(BusError::ReservedPrefix(format!("{} may not use {topic}", session.name)));
        }
        Ok(())
    }

    fn attach(&mut self, topic: &TopicName, key: EndpointKey, publisher: bool, schema: Option<&str>) {
        let t = self.topics.entry(topic.clone()).or_default();
        if t.schema.is_none() {
            t.schema = schema.map(str::to_string);
        }
        if publisher {
            t.publishers.insert(key);
        } else {
            t.subscribers.insert(key);
        }
    }

    fn detach(&mut self, topic: &TopicName, key: EndpointKey, publisher: bool) {
        let Some(t) = self.topics.get_mut(topic) else { return };
        if publisher {
            t.publishers.remove(&key);
        } else {
            t.subscribers.remove(&key);
        }
        if t.publishers.is_empty() && t.subscribers.is_empty() {
            self.topics.remove(topic);
            return;
        }
        let pubs = &self.pubs;
        let subs = &self.subs;
        t.schema = t
            .publishers
            .iter()
            .filter_map(|k| pubs.get(k).and_then(|p| p.schema.clone()))
            .chain(t.subscribers.iter().filter_map(|k| subs.get(k).and_then(|s| s.schema.clone())))
            .next();
    }

    /// Route every endpoint of `node` requested on `external` to `target`.
    /// Validates first so the move is all-or-nothing.
    fn retarget(&mut self, node: &str, external: &TopicName, target: &TopicName) -> Result<(), BusError> {
        let Some(&sid) = self.names.get(node) else { return Ok(()) };
        let session = &self.sessions[&sid];
        let pub_key = session.pubs_by_topic.get(external).map(|&h| (sid, h));
        let sub_key = session.subs_by_topic.get(external).map(|&h| (sid, h));
        let mut schemas = Vec::new();
        if let Some(k) = pub_key {
            schemas.extend(self.pubs[&k].schema.clone());
        }
        if let Some(k) = sub_key {
            schemas.extend(self.subs[&k].schema.clone());
        }
        for s in &schemas {
            self.check_schema(target, Some(s))?;
        }
        if let Some(k) = pub_key {
            let old = std::mem::replace(&mut self.pubs.get_mut(&k).unwrap().effective, target.clone());
            if &old != target {
                self.detach(&old, k, true);
                let schema = self.pubs[&k].schema.clone();
                self.attach(target, k, true, schema.as_deref());
            }
        }
        if let Some(k) = sub_key {
            let old = std::mem::replace(&mut self.subs.get_mut(&k).unwrap().effective, target.clone());
            if &old != target {
                self.detach(&old, k, false);
                let schema = self.subs[&k].schema.clone();
                self.attach(target, k, false, schema.as_deref());
            }
        }
        Ok(())
    }

    fn may_alias(&self, caller: Caller, node: &str, internal: &TopicName) -> Result<(), BusError> {
        match caller {
            Caller::Admin => Ok(()),
            Caller::Session(sid) => {
                let me = &self.sessions.get(&sid).ok_or_else(|| BusError::NotAuthenticated("no session".into()))?.name;
                if me == node || internal.is_owned_by(me) {
                    Ok(())
                } else {
                    Err(BusError::PermissionDenied(format!("{me} may not alias {node} into {internal}")))
                }
            }
        }
    }
}

impl Broker {
    pub fn new() -> Self {
        Broker { inner: Arc::new(Inner { state: RwLock::new(State::default()), clock: SessionClock::start_now() }) }
    }

    pub fn clock(&self) -> SessionClock {
        self.inner.clock
    }

    pub fn open_session(
        &self,
        name: &str,
        pid: Option<u32>,
        sink: Arc<dyn DeliverySink>,
    ) -> Result<SessionId, BusError> {
        if !is_identifier(name) {
            return Err(BusError::InvalidName(name.to_string()));
        }
        let mut st = self.inner.state.write();
        if st.names.contains_key(name) {
            return Err(BusError::NameInUse(name.to_string()));
        }
        st.next_session += 1;
        let id = st.next_session;
        st.sessions.insert(
            id,
            Session {
                name: name.to_string(),
                pid,
                sink,
                next_handle: 0,
                pubs_by_topic: HashMap::new(),
                subs_by_topic: HashMap::new(),
                seqs: HashMap::new(),
            },
        );
        st.names.insert(name.to_string(), id);
        log::debug!("session {id} opened for {name}");
        Ok(id)
    }

    /// Remove a session with all its endpoints, its alias table, and every
    /// alias other nodes have into its wrap namespace.
    pub fn close_session(&self, id: SessionId) {
        let mut st = self.inner.state.write();
        let Some(session) = st.sessions.get(&id) else { return };
        let name = session.name.clone();
        let pubs: Vec<u32> = session.pubs_by_topic.values().copied().collect();
        let subs: Vec<u32> = session.subs_by_topic.values().copied().collect();
        for h in pubs {
            if let Some(p) = st.pubs.remove(&(id, h)) {
                st.detach(&p.effective, (id, h), true);
            }
        }
        for h in subs {
            if let Some(s) = st.subs.remove(&(id, h)) {
                st.detach(&s.effective, (id, h), false);
            }
        }
        st.aliases.remove(&name);
        let owned: Vec<(String, TopicName)> = st
            .aliases
            .iter()
            .flat_map(|(node, table)| {
                table.iter().filter(|(_, int)| int.is_owned_by(&name)).map(|(ext, _)| (node.clone(), ext.clone()))
            })
            .collect();
        for (node, ext) in owned {
            st.aliases.get_mut(&node).map(|t| t.remove(&ext));
            // Moving back to the plain external name cannot conflict: the
            // endpoint's schema was compatible there before aliasing, and
            // anything typed since then was checked against the same name.
            if let Err(e) = st.retarget(&node, &ext, &ext) {
                log::warn!("restoring {node} {ext} after {name} left: {e}");
            }
        }
        st.sessions.remove(&id);
        st.names.remove(&name);
        log::debug!("session {id} ({name}) closed");
    }

    pub fn session_name(&self, id: SessionId) -> Option<String> {
        self.inner.state.read().sessions.get(&id).map(|s| s.name.clone())
    }

    pub fn advertise(&self, session: SessionId, topic: &TopicName, schema: Option<&str>) -> Result<u32, BusError> {
        let mut st = self.inner.state.write();
        let sess = st.sessions.get(&session).ok_or_else(|| BusError::NotAuthenticated("no session".into()))?;
        st.check_namespace(sess, topic)?;
        if let Some(&h) = sess.pubs_by_topic.get(topic) {
            let p = st.pubs.get_mut(&(session, h)).unwrap();
            if p.schema.as_deref() != schema {
                return Err(conflict(topic, p.schema.as_deref().unwrap_or("raw"), schema.unwrap_or("raw")));
            }
            p.refs += 1;
            return Ok(h);
        }
        let effective = st.resolve(&sess.name, topic);
        st.check_schema(&effective, schema)?;
        let sess = st.sessions.get_mut(&session).unwrap();
        sess.next_handle += 1;
        let h = sess.next_handle;
        sess.pubs_by_topic.insert(topic.clone(), h);
        let seq = sess.seqs.entry(topic.clone()).or_default().clone();
        st.pubs.insert(
            (session, h),
            Publication {
                requested: topic.clone(),
                effective: effective.clone(),
                schema: schema.map(str::to_string),
                refs: 1,
                seq,
            },
        );
        st.attach(&effective, (session, h), true, schema);
        Ok(h)
    }

    pub fn subscribe(&self, session: SessionId, topic: &TopicName, schema: Option<&str>) -> Result<u32, BusError> {
        let mut st = self.inner.state.write();
        let sess = st.sessions.get(&session).ok_or_else(|| BusError::NotAuthenticated("no session".into()))?;
        st.check_namespace(sess, topic)?;
        let effective = st.resolve(&sess.name, topic);
        st.check_schema(&effective, schema)?;
        if let Some(&h) = sess.subs_by_topic.get(topic) {
            let s = st.subs.get_mut(&(session, h)).unwrap();
            if s.schema.is_none() && schema.is_some() {
                s.schema = schema.map(str::to_string);
                let t = st.topics.get_mut(&effective).unwrap();
                if t.schema.is_none() {
                    t.schema = schema.map(str::to_string);
                }
            }
            let s = st.subs.get_mut(&(session, h)).unwrap();
            s.refs += 1;
            return Ok(h);
        }
        let sink = sess.sink.clone();
        let sess = st.sessions.get_mut(&session).unwrap();
        sess.next_handle += 1;
        let h = sess.next_handle;
        sess.subs_by_topic.insert(topic.clone(), h);
        st.subs.insert(
            (session, h),
            Subscription {
                requested: topic.clone(),
                effective: effective.clone(),
                schema: schema.map(str::to_string),
                refs: 1,
                sink,
            },
        );
        st.attach(&effective, (session, h), false, schema);
        Ok(h)
    }

    /// Drop one reference to a publication or subscription handle.
    pub fn release(&self, session: SessionId, handle: u32) -> Result<(), BusError> {
        let mut st = self.inner.state.write();
        let key = (session, handle);
        if let Some(p) = st.pubs.get_mut(&key) {
            p.refs -= 1;
            if p.refs == 0 {
                let p = st.pubs.remove(&key).unwrap();
                st.sessions.get_mut(&session).unwrap().pubs_by_topic.remove(&p.requested);
                st.detach(&p.effective, key, true);
            }
            return Ok(());
        }
        if let Some(s) = st.subs.get_mut(&key) {
            s.refs -= 1;
            if s.refs == 0 {
                let s = st.subs.remove(&key).unwrap();
                st.sessions.get_mut(&session).unwrap().subs_by_topic.remove(&s.requested);
                st.detach(&s.effective, key, false);
            }
            return Ok(());
        }
        Err(BusError::StaleHandle(handle.to_string()))
    }

    /// Route one message. Returns the assigned sequence number.
    pub fn publish(
        &self,
        session: SessionId,
        handle: u32,
        payload: Bytes,
        origin: Option<Origin>,
    ) -> Result<u64, BusError> {
        let st = self.inner.state.read();
        let sess = st.sessions.get(&session).ok_or_else(|| BusError::NotAuthenticated("no session".into()))?;
        let p = st.pubs.get(&(session, handle)).ok_or_else(|| BusError::StaleHandle(handle.to_string()))?;
        let topic = st.topics.get(&p.effective);
        let mut seq = p.seq.lock();
        *seq += 1;
        let envelope = Arc::new(Envelope {
            topic: p.effective.clone(),
            schema: p.schema.clone().or_else(|| topic.and_then(|t| t.schema.clone())),
            publisher: sess.name.clone(),
            seq: *seq,
            timestamp: self.inner.clock.now_ns(),
            payload,
            origin,
        });
        if let Some(t) = topic {
            for key in &t.subscribers {
                let s = &st.subs[key];
                s.sink.deliver(key.1, &s.requested, &envelope);
            }
        }
        Ok(*seq)
    }

    /// Install or replace an alias `external -> internal` for `node`.
    /// Existing endpoints of the node move in the same step, so every
    /// publish is routed entirely before or entirely after the change.
    pub fn set_alias(
        &self,
        caller: Caller,
        node: &str,
        external: &TopicName,
        internal: &TopicName,
    ) -> Result<(), BusError> {
        if !internal.is_reserved() {
            return Err(BusError::ReservedPrefix(format!("alias target {internal} must be under /__wrap/")));
        }
        if external.is_reserved() {
            return Err(BusError::ReservedPrefix(format!("cannot alias reserved name {external}")));
        }
        let mut st = self.inner.state.write();
        st.may_alias(caller, node, internal)?;
        if !st.names.contains_key(node) {
            return Err(BusError::NoSuchNode(node.to_string()));
        }
        if let Some(table) = st.aliases.get(node) {
            if let Some((other, _)) = table.iter().find(|(ext, int)| *int == internal && *ext != external) {
                return Err(BusError::AliasCollision(format!("{other} already maps to {internal} for {node}")));
            }
        }
        st.retarget(node, external, internal)?;
        st.aliases.entry(node.to_string()).or_default().insert(external.clone(), internal.clone());
        Ok(())
    }

    /// Remove an alias; a missing alias is not an error.
    pub fn clear_alias(&self, caller: Caller, node: &str, external: &TopicName) -> Result<(), BusError> {
        let mut st = self.inner.state.write();
        let Some(internal) = st.aliases.get(node).and_then(|t| t.get(external)).cloned() else {
            return Ok(());
        };
        st.may_alias(caller, node, &internal)?;
        st.retarget(node, external, external)?;
        if let Some(table) = st.aliases.get_mut(node) {
            table.remove(external);
            if table.is_empty() {
                st.aliases.remove(node);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        let st = self.inner.state.read();
        let endpoint = |requested: &TopicName, effective: &TopicName, schema: &Option<String>| EndpointEntry {
            topic: effective.clone(),
            requested: requested.clone(),
            schema: schema.clone(),
        };
        let mut nodes: Vec<NodeEntry> = st
            .sessions
            .iter()
            .map(|(&sid, s)| {
                let mut publications: Vec<_> = s
                    .pubs_by_topic
                    .values()
                    .map(|h| {
                        let p = &st.pubs[&(sid, *h)];
                        endpoint(&p.requested, &p.effective, &p.schema)
                    })
                    .collect();
                let mut subscriptions: Vec<_> = s
                    .subs_by_topic
                    .values()
                    .map(|h| {
                        let p = &st.subs[&(sid, *h)];
                        endpoint(&p.requested, &p.effective, &p.schema)
                    })
                    .collect();
                publications.sort();
                subscriptions.sort();
                NodeEntry { name: s.name.clone(), pid: s.pid, publications, subscriptions }
            })
            .collect();
        nodes.sort_by(|a, b| a.name.cmp(&b.name));
        let name_of = |key: &EndpointKey| st.sessions[&key.0].name.clone();
        let topics = st
            .topics
            .iter()
            .map(|(name, t)| {
                let mut publishers: Vec<String> = t.publishers.iter().map(name_of).collect();
                let mut subscribers: Vec<String> = t.subscribers.iter().map(name_of).collect();
                publishers.sort();
                subscribers.sort();
                TopicEntry { name: name.clone(), schema: t.schema.clone(), publishers, subscribers }
            })
            .collect();
        let aliases = st
            .aliases
            .iter()
            .flat_map(|(node, table)| {
                table.iter().map(|(e, i)| AliasEntry { node: node.clone(), external: e.clone(), internal: i.clone() })
            })
            .collect();
        GraphSnapshot { nodes, topics, aliases }
    }

    /// Total envelopes dropped across all sessions' subscriber queues.
    pub fn dropped_total(&self) -> u64 {
        self.inner.state.read().sessions.values().map(|s| s.sink.dropped()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Collect(Mutex<Vec<(u32, TopicName, Arc<Envelope>)>>);

    impl DeliverySink for Collect {
        fn deliver(&self, handle: u32, topic: &TopicName, envelope: &Arc<Envelope>) {
            self.0.lock().push((handle, topic.clone(), envelope.clone()));
        }
    }

    fn t(s: &str) -> TopicName {
        TopicName::parse(s).unwrap()
    }

    fn session(b: &Broker, name: &str) -> (SessionId, Arc<Collect>) {
        let sink = Arc::new(Collect::default());
        (b.open_session(name, None, sink.clone()).unwrap(), sink)
    }

    #[test]
    fn advertise_is_idempotent_and_checks_schema() {
        let b = Broker::new();
        let (s, _) = session(&b, "turtle_control_node");
        let h1 = b.advertise(s, &t("/turtle1/cmd_vel"), Some("Twist")).unwrap();
        let h2 = b.advertise(s, &t("/turtle1/cmd_vel"), Some("Twist")).unwrap();
        assert_eq!(h1, h2);
        let (other, _) = session(&b, "other");
        assert!(matches!(b.advertise(other, &t("/turtle1/cmd_vel"), Some("Pose")), Err(BusError::SchemaConflict(_))));
        assert!(matches!(b.subscribe(other, &t("/turtle1/cmd_vel"), Some("Pose")), Err(BusError::SchemaConflict(_))));
        b.subscribe(other, &t("/turtle1/cmd_vel"), None).unwrap();
        assert!(b.snapshot().topic("/turtle1/cmd_vel").is_some());
    }

    #[test]
    fn names_are_unique() {
        let b = Broker::new();
        session(&b, "a");
        assert!(matches!(b.open_session("a", None, Arc::new(Collect::default())), Err(BusError::NameInUse(_))));
        assert!(matches!(b.open_session("", None, Arc::new(Collect::default())), Err(BusError::InvalidName(_))));
    }

    #[test]
    fn publish_without_subscribers_assigns_seq() {
        let b = Broker::new();
        let (s, _) = session(&b, "p");
        let h = b.advertise(s, &t("/x"), Some("Twist")).unwrap();
        assert_eq!(b.publish(s, h, Bytes::from_static(&[0; 48]), None).unwrap(), 1);
        assert_eq!(b.publish(s, h, Bytes::from_static(&[0; 48]), None).unwrap(), 2);
        assert!(matches!(b.publish(s, 99, Bytes::new(), None), Err(BusError::StaleHandle(_))));
    }

    #[test]
    fn reserved_namespace_is_owned() {
        let b = Broker::new();
        let (s, _) = session(&b, "w");
        assert!(b.subscribe(s, &t("/__wrap/w/cmd_vel"), None).is_ok());
        assert!(matches!(b.subscribe(s, &t("/__wrap/other/cmd_vel"), None), Err(BusError::ReservedPrefix(_))));
    }

    #[test]
    fn alias_reroutes_and_restores() {
        let b = Broker::new();
        let (base, _) = session(&b, "move_base");
        let (ext_sub, ext_sink) = session(&b, "listener");
        let (wrapper, wrap_sink) = session(&b, "experimental_move_base");
        let cmd = t("/cmd_vel");
        let internal = cmd.wrapped_under("experimental_move_base");
        let h = b.advertise(base, &cmd, Some("Twist")).unwrap();
        b.subscribe(ext_sub, &cmd, Some("Twist")).unwrap();
        b.subscribe(wrapper, &internal, Some("Twist")).unwrap();

        b.publish(base, h, Bytes::from_static(b"a"), None).unwrap();
        b.set_alias(Caller::Session(wrapper), "move_base", &cmd, &internal).unwrap();
        b.publish(base, h, Bytes::from_static(b"b"), None).unwrap();
        b.clear_alias(Caller::Session(wrapper), "move_base", &cmd).unwrap();
        b.publish(base, h, Bytes::from_static(b"c"), None).unwrap();

        let ext: Vec<u64> = ext_sink.0.lock().iter().map(|d| d.2.seq).collect();
        let wrapped: Vec<u64> = wrap_sink.0.lock().iter().map(|d| d.2.seq).collect();
        assert_eq!(ext, [1, 3]);
        assert_eq!(wrapped, [2]);
        b.snapshot().validate().unwrap();
    }

    #[test]
    fn alias_errors() {
        let b = Broker::new();
        let (w, _) = session(&b, "w");
        session(&b, "base");
        let a = t("/a");
        let bb = t("/b");
        let int = t("/__wrap/w/x");
        assert!(matches!(b.set_alias(Caller::Session(w), "ghost", &a, &int), Err(BusError::NoSuchNode(_))));
        assert!(matches!(b.set_alias(Caller::Admin, "base", &a, &t("/plain")), Err(BusError::ReservedPrefix(_))));
        assert!(matches!(
            b.set_alias(Caller::Session(w), "base", &a, &t("/__wrap/z/x")),
            Err(BusError::PermissionDenied(_))
        ));
        b.set_alias(Caller::Session(w), "base", &a, &int).unwrap();
        assert!(matches!(b.set_alias(Caller::Session(w), "base", &bb, &int), Err(BusError::AliasCollision(_))));
    }

    #[test]
    fn closing_wrapper_restores_base_routes() {
        let b = Broker::new();
        let (base, _) = session(&b, "base");
        let (w, _) = session(&b, "w");
        let cmd = t("/cmd");
        b.advertise(base, &cmd, Some("Twist")).unwrap();
        b.set_alias(Caller::Session(w), "base", &cmd, &cmd.wrapped_under("w")).unwrap();
        assert_eq!(b.snapshot().node("base").unwrap().publications[0].topic, cmd.wrapped_under("w"));
        b.close_session(w);
        let snap = b.snapshot();
        assert!(snap.aliases.is_empty());
        assert_eq!(snap.node("base").unwrap().publications[0].topic, cmd);
        snap.validate().unwrap();
    }

    #[test]
    fn empty_broker_snapshot() {
        let snap = Broker::new().snapshot();
        assert_eq!(snap, GraphSnapshot::default());
        snap.validate().unwrap();
    }
}
