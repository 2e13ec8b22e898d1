//! The serialized command executor behind both the REPL and the control
//! API. Every operation is a `(op, args)` pair with a JSON result.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::model::{document_from_json, export_document, import_document, parse_document, ModelError};
use crate::bus::{BusError, Client, Delivery, PublicationHandle, SubscriptionHandle, TopicName};
use crate::launcher::{LaunchError, ProcessInfo, SpawnRequest, DEFAULT_GRACE};
use crate::node::{Direction, EndpointSet, NodeError, NodeSpec, RunningNode, Runtime, TIME_SCALE_ENV};
use crate::pipeline::{build_literal, parse_literal, parse_pipeline_def};
use crate::schema::{decode, encode, render_message, FieldPath, Layout, MessageValue};

/// How often the graph is polled for `graph-changed` events.
const GRAPH_POLL: Duration = Duration::from_millis(50);
/// Captures keep at most this many messages; older ones are dropped.
const CAPTURE_LIMIT: usize = 1 << 20;

/// An error reply: a stable kind plus a human-readable message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct ApiError {
    pub kind: String,
    pub message: String,
}

impl ApiError {
    pub fn new(kind: &str, message: impl Into<String>) -> ApiError {
        ApiError { kind: kind.to_string(), message: message.into() }
    }
}

fn variant(debug: &str) -> String {
    debug.split(['(', ' ', '{']).next().unwrap_or("Error").to_string()
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        let kind = match &e {
            NodeError::Bus(b) => variant(&format!("{b:?}")),
            NodeError::Launch(l) => variant(&format!("{l:?}")),
            NodeError::Pipeline(_) => "PipelineError".to_string(),
            NodeError::Wrap(w) => variant(&format!("{w:?}")),
            other => variant(&format!("{other:?}")),
        };
        ApiError { kind, message: e.to_string() }
    }
}

impl From<BusError> for ApiError {
    fn from(e: BusError) -> Self {
        ApiError { kind: variant(&format!("{e:?}")), message: e.to_string() }
    }
}

impl From<LaunchError> for ApiError {
    fn from(e: LaunchError) -> Self {
        ApiError { kind: variant(&format!("{e:?}")), message: e.to_string() }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::VersionUnsupported(_) => "VersionUnsupported",
            ModelError::Validation { .. } => "ValidationError",
        };
        ApiError::new(kind, e.to_string())
    }
}

type ApiResult = Result<Json, ApiError>;

/// A pushed notification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub event: String,
    pub data: Json,
}

#[derive(Default)]
pub struct EventHub {
    subscribers: Mutex<Vec<Sender<Event>>>,
}

impl EventHub {
    pub fn subscribe(&self) -> Receiver<Event> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.lock().push(tx);
        rx
    }

    pub fn emit(&self, event: &str, data: Json) {
        let e = Event { event: event.to_string(), data };
        self.subscribers.lock().retain(|tx| tx.send(e.clone()).is_ok());
    }
}

pub type Listener = Arc<dyn Fn(&Delivery) + Send + Sync>;

struct Tap {
    sub: SubscriptionHandle,
    listeners: Arc<RwLock<Vec<(u64, Listener)>>>,
}

/// Fans one raw subscription per topic out to any number of listeners.
struct Taps {
    client: Client,
    taps: Mutex<HashMap<TopicName, Tap>>,
    next: AtomicU64,
}

impl Taps {
    fn add(self: &Arc<Self>, topic: &TopicName, l: Listener) -> Result<TapGuard, BusError> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let mut taps = self.taps.lock();
        if let Some(t) = taps.get(topic) {
            t.listeners.write().push((id, l));
        } else {
            let listeners: Arc<RwLock<Vec<(u64, Listener)>>> = Arc::new(RwLock::new(vec![(id, l)]));
            let ls = listeners.clone();
            let sub = self.client.subscribe_with(
                topic,
                None,
                Arc::new(move |d: &Delivery| {
                    for (_, l) in ls.read().iter() {
                        l(d);
                    }
                }),
            )?;
            taps.insert(topic.clone(), Tap { sub, listeners });
        }
        Ok(TapGuard { taps: Arc::downgrade(self), topic: topic.clone(), id })
    }

    fn remove(&self, topic: &TopicName, id: u64) {
        let mut taps = self.taps.lock();
        let Some(t) = taps.get(topic) else { return };
        let empty = {
            let mut ls = t.listeners.write();
            ls.retain(|(i, _)| *i != id);
            ls.is_empty()
        };
        if empty {
            let t = taps.remove(topic).expect("present");
            let _ = self.client.unsubscribe(&t.sub);
        }
    }
}

/// Keeps a listener attached; dropping it detaches.
pub struct TapGuard {
    taps: Weak<Taps>,
    topic: TopicName,
    id: u64,
}

impl Drop for TapGuard {
    fn drop(&mut self) {
        if let Some(t) = self.taps.upgrade() {
            t.remove(&self.topic, self.id);
        }
    }
}

struct Capture {
    _guard: TapGuard,
    items: Arc<Mutex<VecDeque<Json>>>,
    dropped: Arc<AtomicU64>,
}

enum Entry {
    Declared(NodeSpec),
    Running(RunningNode),
}

impl Entry {
    fn spec(&self) -> NodeSpec {
        match self {
            Entry::Declared(s) => s.clone(),
            Entry::Running(n) => n.spec(),
        }
    }
}

/// Owns the shell's nodes and serializes every mutation.
pub struct Controller {
    rt: Runtime,
    client: Client,
    nodes: Mutex<BTreeMap<String, Entry>>,
    taps: Arc<Taps>,
    captures: Mutex<HashMap<u64, Capture>>,
    next_capture: AtomicU64,
    publishers: Mutex<HashMap<(TopicName, String), PublicationHandle>>,
    events: Arc<EventHub>,
    layouts: Mutex<HashMap<String, Arc<Layout>>>,
    stop: Arc<AtomicBool>,
    poller: Mutex<Option<JoinHandle<()>>>,
}

fn arg<'a>(args: &'a Json, key: &str) -> Result<&'a Json, ApiError> {
    args.get(key).filter(|v| !v.is_null()).ok_or_else(|| ApiError::new("BadArguments", format!("missing `{key}`")))
}

fn s<'a>(args: &'a Json, key: &str) -> Result<&'a str, ApiError> {
    arg(args, key)?.as_str().ok_or_else(|| ApiError::new("BadArguments", format!("`{key}` must be a string")))
}

fn opt_s<'a>(args: &'a Json, key: &str) -> Result<Option<&'a str>, ApiError> {
    match args.get(key) {
        None | Some(Json::Null) => Ok(None),
        Some(v) => v.as_str().map(Some).ok_or_else(|| ApiError::new("BadArguments", format!("`{key}` must be a string"))),
    }
}

fn num(args: &Json, key: &str) -> Result<f64, ApiError> {
    arg(args, key)?.as_f64().ok_or_else(|| ApiError::new("BadArguments", format!("`{key}` must be a number")))
}

fn uint(args: &Json, key: &str, default: u64) -> Result<u64, ApiError> {
    match args.get(key) {
        None | Some(Json::Null) => Ok(default),
        Some(v) => v.as_u64().ok_or_else(|| ApiError::new("BadArguments", format!("`{key}` must be a non-negative integer"))),
    }
}

fn set_arg(args: &Json) -> Result<EndpointSet, ApiError> {
    serde_json::from_value(arg(args, "set")?.clone()).map_err(|_| ApiError::new("BadArguments", "`set` must be reuse or new"))
}

fn direction_arg(args: &Json) -> Result<Direction, ApiError> {
    serde_json::from_value(arg(args, "direction")?.clone())
        .map_err(|_| ApiError::new("BadArguments", "`direction` must be publish or subscribe"))
}

fn topic_arg(args: &Json, key: &str) -> Result<TopicName, ApiError> {
    let t = s(args, key)?;
    TopicName::parse(t).map_err(ApiError::from)
}

fn no_such_node(name: &str) -> ApiError {
    ApiError::new("NoSuchNode", format!("no node `{name}`"))
}

fn to_json<T: Serialize>(v: &T) -> Json {
    serde_json::to_value(v).unwrap_or(Json::Null)
}

fn origin_json(d: &Delivery) -> Json {
    let e = &d.envelope;
    json!({
        "topic": e.topic,
        "schema": e.schema,
        "publisher": e.publisher,
        "seq": e.seq,
        "timestamp": e.timestamp,
        "origin": e.origin,
        "size": e.payload.len(),
    })
}

impl Controller {
    /// Connect to the runtime's broker as `name` and start the graph
    /// watcher.
    pub fn new(rt: Runtime, name: &str) -> Result<Arc<Controller>, ApiError> {
        let client = Client::connect(&rt.connector, name)?;
        let events = Arc::new(EventHub::default());
        let weak = Arc::downgrade(&events);
        rt.params.on_change(move |name, value, version| {
            if let Some(ev) = weak.upgrade() {
                ev.emit("param-changed", json!({ "name": name, "value": value, "version": version }));
            }
        });
        if let Some(l) = &rt.launcher {
            let weak = Arc::downgrade(&events);
            l.on_exit(move |info: &ProcessInfo| {
                if let Some(ev) = weak.upgrade() {
                    ev.emit("process-exited", to_json(info));
                }
            });
        }
        let c = Arc::new(Controller {
            taps: Arc::new(Taps { client: client.clone(), taps: Mutex::default(), next: AtomicU64::new(1) }),
            rt,
            client,
            nodes: Mutex::default(),
            captures: Mutex::default(),
            next_capture: AtomicU64::new(1),
            publishers: Mutex::default(),
            events,
            layouts: Mutex::default(),
            stop: Arc::new(AtomicBool::new(false)),
            poller: Mutex::new(None),
        });
        let poller = {
            let (client, events, stop) = (c.client.clone(), c.events.clone(), c.stop.clone());
            thread::Builder::new()
                .name("nw-graph-watch".into())
                .spawn(move || {
                    let mut last = None;
                    while !stop.load(Ordering::SeqCst) {
                        if let Ok(snap) = client.snapshot() {
                            if last.as_ref() != Some(&snap) {
                                events.emit("graph-changed", to_json(&snap));
                                last = Some(snap);
                            }
                        }
                        thread::sleep(GRAPH_POLL);
                    }
                })
                .map_err(|e| ApiError::new("Io", e.to_string()))?
        };
        *c.poller.lock() = Some(poller);
        Ok(c)
    }

    pub fn runtime(&self) -> &Runtime {
        &self.rt
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn events(&self) -> &EventHub {
        &self.events
    }

    /// Attach a listener to every message on `topic`.
    pub fn tap(&self, topic: &TopicName, l: Listener) -> Result<TapGuard, ApiError> {
        Ok(self.taps.add(topic, l)?)
    }

    fn layout(&self, schema: &str) -> Option<Arc<Layout>> {
        if let Some(l) = self.layouts.lock().get(schema) {
            return Some(l.clone());
        }
        let l = self.rt.schemas.layout(schema)?;
        self.layouts.lock().insert(schema.to_string(), l.clone());
        Some(l)
    }

    fn decoded(&self, d: &Delivery) -> Option<(Arc<Layout>, MessageValue)> {
        let layout = self.layout(d.envelope.schema.as_deref()?)?;
        let m = decode(&layout, &d.envelope.payload).ok()?;
        Some((layout, m))
    }

    /// Human-readable form of a delivered message.
    pub fn render(&self, d: &Delivery) -> String {
        match self.decoded(d) {
            Some((l, m)) => render_message(&l, &m),
            None => format!("<{} bytes{}>", d.envelope.payload.len(), d.envelope.schema.as_deref().map(|s| format!(" of {s}")).unwrap_or_default()),
        }
    }

    fn literal(&self, text: &str) -> Result<(Arc<Layout>, MessageValue), ApiError> {
        let lit = parse_literal(text).map_err(|e| ApiError::new("ParseError", format!("{e}\n{}", e.caret(text))))?;
        let m = build_literal(&lit, self.rt.ctx()).map_err(|e| ApiError::new("PipelineError", e.to_string()))?;
        let layout = self.layout(&m.schema).ok_or_else(|| ApiError::new("UnknownSchema", m.schema.clone()))?;
        Ok((layout, m))
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.poller.lock().take() {
            let _ = t.join();
        }
        self.captures.lock().clear();
        let nodes = std::mem::take(&mut *self.nodes.lock());
        for (_, e) in nodes {
            if let Entry::Running(n) = e {
                n.stop();
            }
        }
        if let Some(l) = &self.rt.launcher {
            l.shutdown();
        }
        self.client.close();
    }

    /// Run one operation.
    pub fn execute(&self, op: &str, args: &Json) -> ApiResult {
        let empty = json!({});
        let args = if args.is_null() { &empty } else { args };
        if !args.is_object() {
            return Err(ApiError::new("BadArguments", "args must be an object"));
        }
        match op {
            "node.declare" => self.declare(s(args, "name")?),
            "node.base" => {
                let (package, base) = (s(args, "package")?, s(args, "base")?);
                self.mutate(s(args, "node")?, |spec| {
                    spec.set_base(package, base)?;
                    Ok(json!({ "package": package, "node": base }))
                })
            }
            "node.endpoint" => {
                let (set, direction, topic) = (set_arg(args)?, direction_arg(args)?, s(args, "topic")?);
                let (schema, pipeline) = (opt_s(args, "type")?, opt_s(args, "pipeline")?);
                self.mutate(s(args, "node")?, |spec| {
                    let id = spec.add_endpoint(set, direction, topic, schema, pipeline)?;
                    Ok(json!({ "id": id.to_string() }))
                })
            }
            "node.remove_endpoint" => {
                let (set, direction, topic) = (set_arg(args)?, direction_arg(args)?, s(args, "topic")?);
                self.mutate(s(args, "node")?, |spec| spec.remove_endpoint(set, direction, topic).map(|_| json!({})))
            }
            "node.replace" => {
                let (from, to, pipeline, schema) = (s(args, "from")?, s(args, "to")?, s(args, "pipeline")?, opt_s(args, "type")?);
                self.mutate(s(args, "node")?, |spec| spec.add_replace(from, to, pipeline, schema).map(|_| json!({})))
            }
            "node.remove_replace" => {
                let from = s(args, "from")?;
                self.mutate(s(args, "node")?, |spec| spec.remove_replace(from).map(|_| json!({})))
            }
            "node.timer" => {
                let (period, pipeline) = (num(args, "period")?, s(args, "pipeline")?);
                self.mutate(s(args, "node")?, |spec| spec.add_timer(period, pipeline).map(|id| json!({ "id": id })))
            }
            "node.remove_timer" => {
                let id = u32::try_from(uint(args, "id", 0)?).map_err(|_| ApiError::new("BadArguments", "bad timer id"))?;
                self.mutate(s(args, "node")?, |spec| spec.remove_timer(id).map(|_| json!({})))
            }
            "node.param" => {
                let (name, value) = (s(args, "name")?, num(args, "value")?);
                let node = s(args, "node")?;
                let out = self.mutate(node, |spec| spec.set_param(name, value).map(|_| json!({})))?;
                if matches!(self.nodes.lock().get(node), Some(Entry::Running(_))) {
                    let _ = self.rt.params.set(name, value);
                }
                Ok(out)
            }
            "node.create" => self.create(s(args, "node")?),
            "node.stop" => self.stop_node(s(args, "node")?),
            "node.unwrap" => self.unwrap_node(s(args, "node")?),
            "node.write" => {
                let (node, topic) = (s(args, "node")?, s(args, "topic")?);
                let (_, m) = self.literal(s(args, "message")?)?;
                match self.nodes.lock().get(node) {
                    Some(Entry::Running(n)) => Ok(json!({ "seq": n.write(topic, &m)? })),
                    Some(Entry::Declared(_)) => Err(ApiError::new("NotRunning", format!("node `{node}` is not running"))),
                    None => Err(no_such_node(node)),
                }
            }
            "node.list" => self.node_list(),
            "node.info" => self.node_info(s(args, "name")?),
            "node.log" => {
                let name = s(args, "name")?;
                let n = uint(args, "lines", 20)? as usize;
                match self.nodes.lock().get(name) {
                    Some(Entry::Running(node)) => Ok(json!({ "lines": node.logs(n) })),
                    Some(Entry::Declared(_)) => Ok(json!({ "lines": [] })),
                    None => Err(no_such_node(name)),
                }
            }
            "pipeline.define" => {
                let text = s(args, "text")?;
                let p = parse_pipeline_def(text).map_err(|e| ApiError::new("ParseError", format!("{e}\n{}", e.caret(text))))?;
                let name = p.name.clone();
                let shown = p.to_string();
                self.rt.pipelines.define(p);
                Ok(json!({ "name": name, "text": shown }))
            }
            "pipeline.list" => Ok(json!(self.rt.pipelines.names())),
            "pipeline.get" => {
                let name = s(args, "name")?;
                let p = self.rt.pipelines.get(name).ok_or_else(|| ApiError::new("UnknownPipeline", format!("no pipeline `{name}`")))?;
                Ok(json!({ "name": name, "text": p.to_string() }))
            }
            "schema.define" => {
                let ids = self.rt.schemas.define_text(s(args, "text")?).map_err(|e| ApiError::new("SchemaError", e))?;
                let names: Vec<String> =
                    ids.iter().filter_map(|id| self.rt.schemas.layout_by_id(*id).map(|l| l.name.clone())).collect();
                Ok(json!({ "names": names }))
            }
            "param.set" => {
                let (name, value) = (s(args, "name")?, num(args, "value")?);
                let before = self.client.now_ns();
                let version = self.rt.params.set(name, value).map_err(|e| ApiError::new("InvalidIdentifier", e.to_string()))?;
                Ok(json!({ "name": name, "value": value, "version": version, "before_ns": before, "at_ns": self.client.now_ns() }))
            }
            "param.list" => Ok(to_json(&self.rt.params.snapshot())),
            "graph.get" => Ok(to_json(&self.client.snapshot()?)),
            "topic.list" => Ok(to_json(&self.client.snapshot()?.topics)),
            "topic.info" => {
                let t = topic_arg(args, "topic")?;
                let snap = self.client.snapshot()?;
                let entry = snap.topic(t.as_str()).ok_or_else(|| ApiError::new("NoSuchTopic", format!("no topic {t}")))?;
                let aliases: Vec<_> = snap.aliases.iter().filter(|a| a.external == t || a.internal == t).collect();
                Ok(json!({ "topic": entry, "aliases": aliases }))
            }
            "topic.pub" => {
                let t = topic_arg(args, "topic")?;
                let (layout, m) = self.literal(s(args, "message")?)?;
                let bytes = encode(&layout, &m).map_err(|e| ApiError::new("ShapeMismatch", e.to_string()))?;
                let key = (t.clone(), m.schema.clone());
                let handle = {
                    let mut pubs = self.publishers.lock();
                    match pubs.get(&key) {
                        Some(h) => h.clone(),
                        None => {
                            let h = self.client.advertise(&t, Some(&m.schema))?;
                            pubs.insert(key, h.clone());
                            h
                        }
                    }
                };
                Ok(json!({ "seq": self.client.publish(&handle, Bytes::from(bytes), None)? }))
            }
            "topic.echo" => {
                let t = topic_arg(args, "topic")?;
                let count = uint(args, "count", 1)? as usize;
                let timeout = args.get("timeout").and_then(Json::as_f64).unwrap_or(1.0).clamp(0.0, 60.0);
                let mut out = Vec::new();
                self.echo(&t, Some(count), Some(Duration::from_secs_f64(timeout)), &AtomicBool::new(false), |line| out.push(line))?;
                Ok(json!({ "messages": out }))
            }
            "capture.start" => self.capture_start(args),
            "capture.take" => {
                let id = uint(args, "id", 0)?;
                let max = uint(args, "max", u64::MAX)? as usize;
                let caps = self.captures.lock();
                let c = caps.get(&id).ok_or_else(|| ApiError::new("NoSuchCapture", format!("no capture {id}")))?;
                let mut items = c.items.lock();
                let n = max.min(items.len());
                let taken: Vec<Json> = items.drain(..n).collect();
                Ok(json!({ "items": taken, "dropped": c.dropped.load(Ordering::Relaxed) }))
            }
            "capture.stop" => {
                let id = uint(args, "id", 0)?;
                let c = self.captures.lock().remove(&id).ok_or_else(|| ApiError::new("NoSuchCapture", format!("no capture {id}")))?;
                let left = c.items.lock().len();
                Ok(json!({ "discarded": left }))
            }
            "model.export" => {
                let names: Vec<String> = match args.get("nodes") {
                    Some(Json::Array(v)) => v.iter().filter_map(|x| x.as_str().map(str::to_string)).collect(),
                    _ => vec![s(args, "node")?.to_string()],
                };
                let specs = {
                    let nodes = self.nodes.lock();
                    names.iter().map(|n| nodes.get(n).map(Entry::spec).ok_or_else(|| no_such_node(n))).collect::<Result<Vec<_>, _>>()?
                };
                let doc = export_document(&specs, &self.rt.pipelines, &self.rt.schemas)?;
                Ok(to_json(&doc))
            }
            "model.import" => {
                let doc = match arg(args, "document")? {
                    Json::String(text) => parse_document(text)?,
                    v => document_from_json(v.clone())?,
                };
                let mut nodes = self.nodes.lock();
                for spec in &doc.nodes {
                    if matches!(nodes.get(&spec.name), Some(Entry::Running(_))) {
                        return Err(ApiError::new("NodeRunning", format!("node `{}` is running; stop it first", spec.name)));
                    }
                }
                let specs = import_document(&doc, &self.rt.pipelines, &self.rt.schemas)?;
                let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
                for spec in specs {
                    nodes.insert(spec.name.clone(), Entry::Declared(spec));
                }
                Ok(json!({ "nodes": names }))
            }
            "process.launch" => self.launch(s(args, "package")?, s(args, "node")?, opt_s(args, "name")?),
            "process.list" => {
                let l = self.launcher()?;
                Ok(json!(l.processes().iter().map(|p| p.info()).collect::<Vec<_>>()))
            }
            "process.stop" => {
                let name = s(args, "name")?;
                let h = self.launcher()?.find(name).ok_or_else(|| ApiError::new("NoSuchProcess", format!("no process `{name}`")))?;
                let state = h.stop(DEFAULT_GRACE);
                Ok(json!({ "name": name, "state": state }))
            }
            other => Err(ApiError::new("UnknownOp", format!("unknown op `{other}`"))),
        }
    }

    fn declare(&self, name: &str) -> ApiResult {
        let mut nodes = self.nodes.lock();
        if let Some(e) = nodes.get(name) {
            let state = if matches!(e, Entry::Running(_)) { "running" } else { "declared" };
            return Ok(json!({ "name": name, "state": state, "new": false }));
        }
        nodes.insert(name.to_string(), Entry::Declared(NodeSpec::new(name)?));
        Ok(json!({ "name": name, "state": "declared", "new": true }))
    }

    fn mutate(&self, node: &str, f: impl FnOnce(&mut NodeSpec) -> Result<Json, NodeError>) -> ApiResult {
        let mut nodes = self.nodes.lock();
        match nodes.get_mut(node) {
            None => Err(no_such_node(node)),
            Some(Entry::Declared(spec)) => {
                let mut next = spec.clone();
                let out = f(&mut next)?;
                *spec = next;
                Ok(out)
            }
            Some(Entry::Running(n)) => Ok(n.modify(f)?),
        }
    }

    fn create(&self, name: &str) -> ApiResult {
        let mut nodes = self.nodes.lock();
        let spec = match nodes.get(name) {
            None => return Err(no_such_node(name)),
            Some(Entry::Running(_)) => return Err(ApiError::new("AlreadyRunning", format!("node `{name}` is already running"))),
            Some(Entry::Declared(spec)) => spec.clone(),
        };
        spec.validate()?;
        let node = self.rt.create(spec)?;
        let mode = format!("{:?}", node.mode()).to_lowercase();
        nodes.insert(name.to_string(), Entry::Running(node));
        Ok(json!({ "name": name, "mode": mode }))
    }

    fn stop_node(&self, name: &str) -> ApiResult {
        let mut nodes = self.nodes.lock();
        match nodes.remove(name) {
            None => Err(no_such_node(name)),
            Some(Entry::Declared(s)) => {
                nodes.insert(name.to_string(), Entry::Declared(s));
                Err(ApiError::new("NotRunning", format!("node `{name}` is not running")))
            }
            Some(Entry::Running(n)) => {
                n.stop();
                nodes.insert(name.to_string(), Entry::Declared(n.spec()));
                Ok(json!({ "name": name, "state": "declared" }))
            }
        }
    }

    fn unwrap_node(&self, name: &str) -> ApiResult {
        let mut nodes = self.nodes.lock();
        match nodes.get_mut(name) {
            None => Err(no_such_node(name)),
            Some(Entry::Declared(s)) => {
                s.reuse = Default::default();
                s.replace.clear();
                Ok(json!({ "name": name }))
            }
            Some(Entry::Running(n)) => {
                n.unwrap()?;
                Ok(json!({ "name": name }))
            }
        }
    }

    fn node_list(&self) -> ApiResult {
        let snap = self.client.snapshot()?;
        let nodes = self.nodes.lock();
        let mut out: BTreeMap<String, Json> = BTreeMap::new();
        for n in &snap.nodes {
            out.insert(n.name.clone(), json!({ "name": n.name, "state": "external", "pid": n.pid }));
        }
        for (name, e) in nodes.iter() {
            let v = match e {
                Entry::Declared(_) => json!({ "name": name, "state": "declared", "pid": null }),
                Entry::Running(n) => json!({
                    "name": name,
                    "state": "running",
                    "mode": format!("{:?}", n.mode()).to_lowercase(),
                    "pid": snap.node(name).and_then(|e| e.pid),
                }),
            };
            out.insert(name.clone(), v);
        }
        Ok(json!(out.into_values().collect::<Vec<_>>()))
    }

    fn node_info(&self, name: &str) -> ApiResult {
        let snap = self.client.snapshot()?;
        let entry = snap.node(name).cloned();
        let nodes = self.nodes.lock();
        match nodes.get(name) {
            Some(Entry::Running(n)) => Ok(json!({
                "name": name,
                "state": "running",
                "mode": format!("{:?}", n.mode()).to_lowercase(),
                "spec": n.spec(),
                "plan": n.plan(),
                "stats": n.stats(),
                "graph": entry,
                "base_process": n.base_process().map(|p| p.info()),
            })),
            Some(Entry::Declared(s)) => Ok(json!({ "name": name, "state": "declared", "spec": s, "graph": entry })),
            None => match entry {
                Some(e) => Ok(json!({ "name": name, "state": "external", "graph": e })),
                None => Err(no_such_node(name)),
            },
        }
    }

    fn launcher(&self) -> Result<&crate::launcher::Launcher, ApiError> {
        self.rt.launcher.as_ref().ok_or_else(|| ApiError::new("LaunchFailure", "no package path configured"))
    }

    fn launch(&self, package: &str, node: &str, name: Option<&str>) -> ApiResult {
        let l = self.launcher()?;
        let uri = self.rt.connector.uri().ok_or_else(|| ApiError::new("LaunchFailure", "launching needs a TCP broker"))?;
        let req = SpawnRequest {
            path: l.resolve(package, node)?,
            name: name.unwrap_or(node).to_string(),
            package: package.to_string(),
            node: node.to_string(),
            aliases: vec![],
            broker_uri: uri.to_string(),
            args: vec![],
            env: vec![(TIME_SCALE_ENV.to_string(), self.rt.time_scale.to_string())],
        };
        let h = l.spawn(&req, &self.client)?;
        Ok(to_json(&h.info()))
    }

    fn capture_start(&self, args: &Json) -> ApiResult {
        let t = topic_arg(args, "topic")?;
        let fields: Vec<String> = match args.get("fields") {
            Some(Json::Array(v)) => v.iter().filter_map(|x| x.as_str().map(str::to_string)).collect(),
            _ => vec![],
        };
        for f in &fields {
            FieldPath::parse(f).map_err(|e| ApiError::new("BadFieldPath", e.to_string()))?;
        }
        let with_text = args.get("text").and_then(Json::as_bool).unwrap_or(false);
        let items: Arc<Mutex<VecDeque<Json>>> = Arc::default();
        let dropped = Arc::new(AtomicU64::new(0));
        let (it, dr) = (items.clone(), dropped.clone());
        let schemas = self.rt.schemas.clone();
        let layouts: Mutex<HashMap<String, Arc<Layout>>> = Mutex::default();
        let listener: Listener = Arc::new(move |d: &Delivery| {
            let mut item = origin_json(d);
            if !fields.is_empty() || with_text {
                let layout = d.envelope.schema.as_deref().and_then(|s| {
                    let mut ls = layouts.lock();
                    if let Some(l) = ls.get(s) {
                        return Some(l.clone());
                    }
                    let l = schemas.layout(s)?;
                    ls.insert(s.to_string(), l.clone());
                    Some(l)
                });
                let decoded = layout.and_then(|l| decode(&l, &d.envelope.payload).ok().map(|m| (l, m)));
                if let Some((l, m)) = decoded {
                    let mut vals = serde_json::Map::new();
                    for f in &fields {
                        let v = FieldPath::parse(f)
                            .ok()
                            .and_then(|p| l.resolve(&p).ok())
                            .and_then(|r| m.get(&r).and_then(|v| v.as_f64()));
                        vals.insert(f.clone(), json!(v));
                    }
                    item["fields"] = Json::Object(vals);
                    if with_text {
                        item["text"] = json!(render_message(&l, &m));
                    }
                }
            }
            let mut q = it.lock();
            if q.len() >= CAPTURE_LIMIT {
                q.pop_front();
                dr.fetch_add(1, Ordering::Relaxed);
            }
            q.push_back(item);
        });
        let guard = self.tap(&t, listener)?;
        let id = self.next_capture.fetch_add(1, Ordering::Relaxed);
        self.captures.lock().insert(id, Capture { _guard: guard, items, dropped });
        Ok(json!({ "id": id }))
    }

    /// Print messages on `topic` until `count` arrived, `timeout` passed
    /// or `interrupt` is set.
    pub fn echo(
        &self,
        topic: &TopicName,
        count: Option<usize>,
        timeout: Option<Duration>,
        interrupt: &AtomicBool,
        mut out: impl FnMut(String),
    ) -> Result<usize, ApiError> {
        let (tx, rx) = mpsc::channel::<Delivery>();
        let tx = Mutex::new(tx);
        let _guard = self.tap(topic, Arc::new(move |d: &Delivery| {
            let _ = tx.lock().send(d.clone());
        }))?;
        let deadline = timeout.and_then(|t| Instant::now().checked_add(t));
        let mut seen = 0;
        while count.is_none_or(|c| seen < c) && !interrupt.load(Ordering::SeqCst) {
            let now = Instant::now();
            if deadline.is_some_and(|d| now >= d) {
                break;
            }
            let wait = deadline.map_or(Duration::from_millis(50), |d| (d - now).min(Duration::from_millis(50)));
            if let Ok(d) = rx.recv_timeout(wait) {
                out(self.render(&d));
                seen += 1;
            }
        }
        Ok(seen)
    }
}

impl Drop for Controller {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}
