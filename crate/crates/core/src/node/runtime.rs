use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use super::spec::{Direction, EndpointId, EndpointSet, NodeSpec};
use super::timer::Ticker;
use super::NodeError;
use crate::bus::{
    Client, Connector, Delivery, Handler, Origin, PublicationHandle, SubscriptionHandle, TopicName,
};
use crate::launcher::{Launcher, ProcessHandle, SpawnRequest, DEFAULT_GRACE};
use crate::pipeline::{
    check_pipeline, emit_program, eval_pipeline, EvalContext, InputKind, ParamStore, Payload, PipelineLibrary,
    PipelineSpec,
};
use crate::schema::{decode, encode, MessageValue, RawPayload, SchemaRegistry};
use crate::wrap::{plan_wrap, WrapPlan};

pub const TIME_SCALE_ENV: &str = "NW_TIME_SCALE";
const LOG_LINES: usize = 512;

/// Everything nodes share: how to reach the broker, the schema and
/// pipeline libraries, the parameter store and the process launcher.
#[derive(Clone)]
pub struct Runtime {
    pub connector: Connector,
    pub schemas: Arc<SchemaRegistry>,
    pub pipelines: Arc<PipelineLibrary>,
    pub params: Arc<ParamStore>,
    pub launcher: Option<Launcher>,
    /// Timer periods are divided by this; 2.0 runs timers twice as fast.
    pub time_scale: f64,
}

impl Runtime {
    pub fn new(connector: Connector) -> Runtime {
        Runtime {
            connector,
            schemas: Arc::new(SchemaRegistry::with_builtins()),
            pipelines: Arc::new(PipelineLibrary::new()),
            params: Arc::new(ParamStore::new()),
            launcher: None,
            time_scale: 1.0,
        }
    }

    /// Broker from `NW_BROKER_URI`, packages from `NW_PACKAGE_PATH`,
    /// time scale from `NW_TIME_SCALE`.
    pub fn from_env() -> Runtime {
        let mut rt = Runtime::new(Connector::from_env()).with_launcher(Launcher::from_env());
        rt.time_scale = time_scale_from_env();
        rt
    }

    pub fn with_launcher(mut self, launcher: Launcher) -> Runtime {
        self.launcher = Some(launcher);
        self
    }

    pub fn ctx(&self) -> EvalContext<'_> {
        EvalContext { params: &self.params, schemas: &self.schemas }
    }

    pub fn scaled(&self, seconds: f64) -> Duration {
        Duration::try_from_secs_f64(seconds / self.time_scale).unwrap_or(Duration::MAX)
    }

    pub fn create(&self, spec: NodeSpec) -> Result<RunningNode, NodeError> {
        RunningNode::create(self, spec, HashMap::new())
    }

    /// Create with host-language handlers for subscriptions that have no
    /// pipeline. A pipeline declared later takes precedence.
    pub fn create_with(
        &self,
        spec: NodeSpec,
        handlers: HashMap<TopicName, HostHandler>,
    ) -> Result<RunningNode, NodeError> {
        RunningNode::create(self, spec, handlers)
    }
}

pub fn time_scale_from_env() -> f64 {
    std::env::var(TIME_SCALE_ENV).ok().and_then(|v| v.parse::<f64>().ok()).filter(|v| *v > 0.0).unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    Running,
    Stopped,
}

/// How a wrapper reached its base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WrapMode {
    /// No base node.
    None,
    /// The wrapper spawned the base with its aliases preinstalled.
    Launch,
    /// The base was already running; aliases were installed live.
    Attach,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NodeStats {
    /// Messages taken off subscriptions.
    pub handled: u64,
    /// Messages published as a result of handling or timers.
    pub published: u64,
    /// Messages a pipeline discarded.
    pub dropped: u64,
    pub errors: u64,
    pub timer_ticks: u64,
}

pub type HostHandler = Arc<dyn Fn(&HostContext<'_>, &Delivery) + Send + Sync>;

/// What a host handler may do: publish on the node's topics and log.
pub struct HostContext<'a> {
    core: &'a Core,
    origin: Option<Origin>,
}

impl HostContext<'_> {
    /// Publish; the message is marked as derived from the one being
    /// handled.
    pub fn write(&self, topic: &str, msg: &MessageValue) -> Result<u64, NodeError> {
        self.core.write(topic, Payload::Typed(msg.clone()), self.origin.clone())
    }

    pub fn log(&self, line: impl Into<String>) {
        self.core.note(line.into());
    }

    pub fn schemas(&self) -> &SchemaRegistry {
        &self.core.rt.schemas
    }

    pub fn params(&self) -> &ParamStore {
        &self.core.rt.params
    }
}

#[derive(Default)]
struct Counters {
    handled: AtomicU64,
    published: AtomicU64,
    dropped: AtomicU64,
    errors: AtomicU64,
    timer_ticks: AtomicU64,
}

/// State shared between the node and its handler threads.
struct Core {
    name: String,
    rt: Runtime,
    client: Client,
    pubs: RwLock<HashMap<TopicName, PublicationHandle>>,
    host: RwLock<HashMap<TopicName, HostHandler>>,
    log: Mutex<VecDeque<String>>,
    counters: Counters,
}

impl Core {
    fn note(&self, line: String) {
        log::info!("[{}] {line}", self.name);
        let mut log = self.log.lock();
        if log.len() == LOG_LINES {
            log.pop_front();
        }
        log.push_back(line);
    }

    fn fail(&self, line: String) {
        if !self.client.is_connected() {
            // A handler finishing after stop; not worth an error.
            log::debug!("[{}] after stop: {line}", self.name);
            return;
        }
        self.counters.errors.fetch_add(1, Ordering::Relaxed);
        log::warn!("[{}] {line}", self.name);
        let mut log = self.log.lock();
        if log.len() == LOG_LINES {
            log.pop_front();
        }
        log.push_back(format!("error: {line}"));
    }

    fn write(&self, topic: &str, payload: Payload, origin: Option<Origin>) -> Result<u64, NodeError> {
        let t = TopicName::parse(topic).map_err(|_| NodeError::InvalidTopic(topic.to_string()))?;
        self.publish(&t, payload, origin)
    }

    fn publish(&self, topic: &TopicName, payload: Payload, origin: Option<Origin>) -> Result<u64, NodeError> {
        let publication =
            self.pubs.read().get(topic).cloned().ok_or_else(|| NodeError::NotPublished(topic.to_string()))?;
        let bytes = match payload {
            Payload::Typed(m) => {
                if let Some(s) = &publication.schema {
                    if *s != m.schema {
                        return Err(NodeError::ShapeMismatch(format!("{topic} carries {s}, not {}", m.schema)));
                    }
                }
                let layout = self.rt.schemas.layout(&m.schema).ok_or_else(|| NodeError::UnknownSchema(m.schema.clone()))?;
                Bytes::from(encode(&layout, &m).map_err(|e| NodeError::ShapeMismatch(e.to_string()))?)
            }
            Payload::Raw(r) => {
                if let (Some(s), Some(h)) = (&publication.schema, &r.schema_hint) {
                    if s != h {
                        return Err(NodeError::ShapeMismatch(format!("{topic} carries {s}, not {h}")));
                    }
                }
                r.bytes
            }
        };
        let seq = self.client.publish(&publication, bytes, origin)?;
        self.counters.published.fetch_add(1, Ordering::Relaxed);
        Ok(seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Route {
    pipeline: Option<String>,
    /// Relays publish results here when the pipeline names no outputs.
    relay_to: Option<TopicName>,
}

struct Binding {
    topic: TopicName,
    schema: Option<String>,
    route: RwLock<Route>,
    busy: AtomicBool,
}

fn handle(core: &Core, binding: &Binding, d: &Delivery) {
    binding.busy.store(true, Ordering::SeqCst);
    // The route is read once per message, so a swap lands between two
    // messages and each message sees exactly one version.
    let route = binding.route.read().clone();
    core.counters.handled.fetch_add(1, Ordering::Relaxed);
    let origin = Some(d.envelope.root_origin());
    match &route.pipeline {
        None => {
            if let Some(target) = &route.relay_to {
                let raw = RawPayload { bytes: d.envelope.payload.clone(), schema_hint: d.envelope.schema.clone() };
                if let Err(e) = core.publish(target, Payload::Raw(raw), origin) {
                    core.fail(format!("relay {} -> {target}: {e}", binding.topic));
                }
            } else {
                let h = core.host.read().get(&binding.topic).cloned();
                if let Some(h) = h {
                    h(&HostContext { core, origin }, d);
                }
            }
        }
        Some(name) => run_pipeline(core, binding, &route, name, d, origin),
    }
    binding.busy.store(false, Ordering::SeqCst);
}

fn run_pipeline(core: &Core, binding: &Binding, route: &Route, name: &str, d: &Delivery, origin: Option<Origin>) {
    let Some(spec) = core.rt.pipelines.get(name) else {
        core.fail(format!("{}: pipeline `{name}` is not defined", binding.topic));
        return;
    };
    let input = match &binding.schema {
        Some(s) => {
            let Some(layout) = core.rt.schemas.layout(s) else {
                core.fail(format!("{}: unknown schema {s}", binding.topic));
                return;
            };
            match decode(&layout, &d.envelope.payload) {
                Ok(m) => Payload::Typed(m),
                Err(e) => {
                    core.fail(format!("{}: cannot decode {s}: {e}", binding.topic));
                    return;
                }
            }
        }
        None => Payload::Raw(RawPayload { bytes: d.envelope.payload.clone(), schema_hint: d.envelope.schema.clone() }),
    };
    let out = match eval_pipeline(&spec, input, core.rt.ctx()) {
        Ok(o) => o,
        Err(e) => {
            core.fail(format!("{}: pipeline `{name}`: {e}", binding.topic));
            return;
        }
    };
    for l in out.logs {
        core.note(l);
    }
    if out.dropped {
        core.counters.dropped.fetch_add(1, Ordering::Relaxed);
    }
    for f in out.forwards {
        if let Err(e) = core.publish(&f.topic, f.payload, origin.clone()) {
            core.fail(format!("{}: pipeline `{name}` forward: {e}", binding.topic));
        }
    }
    if let (Some(target), Some(result)) = (&route.relay_to, out.result) {
        if spec.output_topics().is_empty() {
            if let Err(e) = core.publish(target, result, origin) {
                core.fail(format!("relay {} -> {target}: {e}", binding.topic));
            }
        }
    }
}

fn tick(core: &Core, pipeline: &RwLock<String>) {
    core.counters.timer_ticks.fetch_add(1, Ordering::Relaxed);
    let name = pipeline.read().clone();
    let Some(spec) = core.rt.pipelines.get(&name) else {
        core.fail(format!("timer: pipeline `{name}` is not defined"));
        return;
    };
    match emit_program(&spec, core.rt.ctx()) {
        Ok(out) => {
            for l in out.logs {
                core.note(l);
            }
            for f in out.forwards {
                if let Err(e) = core.publish(&f.topic, f.payload, None) {
                    core.fail(format!("timer `{name}`: {e}"));
                }
            }
        }
        Err(e) => core.fail(format!("timer `{name}`: {e}")),
    }
}

struct LiveSub {
    handle: SubscriptionHandle,
    binding: Arc<Binding>,
}

struct LiveTimer {
    period: f64,
    pipeline: Arc<RwLock<String>>,
    ticker: Ticker,
}

/// What a spec asks the broker for.
#[derive(Default)]
struct Desired {
    pubs: BTreeMap<TopicName, Option<String>>,
    subs: BTreeMap<TopicName, (Option<String>, Route)>,
    aliases: BTreeMap<TopicName, TopicName>,
}

fn desired(spec: &NodeSpec, plan: &WrapPlan) -> Result<Desired, NodeError> {
    let mut d = Desired { aliases: plan.aliases.clone(), ..Default::default() };
    let mut publish = |t: &TopicName, schema: &Option<String>| -> Result<(), NodeError> {
        match d.pubs.get(t) {
            Some(existing) if existing != schema => Err(NodeError::SchemaConflict(format!(
                "{t} is published as both {} and {}",
                existing.as_deref().unwrap_or("raw"),
                schema.as_deref().unwrap_or("raw")
            ))),
            _ => {
                d.pubs.insert(t.clone(), schema.clone());
                Ok(())
            }
        }
    };
    for (t, e) in &spec.new_set.publish {
        publish(t, &e.schema)?;
    }
    for r in &plan.relays {
        publish(&r.target, &r.schema)?;
    }
    for r in &plan.relays {
        let route = Route { pipeline: r.pipeline.clone(), relay_to: Some(r.target.clone()) };
        d.subs.insert(r.source.clone(), (r.schema.clone(), route));
    }
    for (t, e) in &spec.new_set.subscribe {
        if d.subs.contains_key(t) {
            return Err(NodeError::DuplicateEndpoint(format!("subscribe {t} is also relayed")));
        }
        d.subs.insert(t.clone(), (e.schema.clone(), Route { pipeline: e.pipeline.clone(), relay_to: None }));
    }
    Ok(d)
}

/// Reject references that cannot work before touching the broker.
fn check_refs(rt: &Runtime, spec: &NodeSpec, d: &Desired) -> Result<(), NodeError> {
    for schema in d.pubs.values().chain(d.subs.values().map(|(s, _)| s)).flatten() {
        if rt.schemas.layout(schema).is_none() {
            return Err(NodeError::UnknownSchema(schema.clone()));
        }
    }
    for (schema, route) in d.subs.values() {
        if let Some(name) = &route.pipeline {
            let p = rt.pipelines.get(name).ok_or_else(|| NodeError::UnknownPipeline(name.clone()))?;
            let layout = schema.as_deref().and_then(|s| rt.schemas.layout(s));
            let input = layout.as_deref().map_or(InputKind::Raw, InputKind::Typed);
            check_pipeline(&p, input, &rt.schemas)?;
            check_outputs(&p, d)?;
        }
    }
    for t in spec.timers.values() {
        let p = rt.pipelines.get(&t.pipeline).ok_or_else(|| NodeError::UnknownPipeline(t.pipeline.clone()))?;
        check_pipeline(&p, InputKind::Timer, &rt.schemas)?;
        check_outputs(&p, d)?;
    }
    Ok(())
}

fn check_outputs(p: &PipelineSpec, d: &Desired) -> Result<(), NodeError> {
    match p.output_topics().into_iter().find(|t| !d.pubs.contains_key(t)) {
        Some(t) => Err(NodeError::NotPublished(format!("{t} (target of pipeline `{}`)", p.name))),
        None => Ok(()),
    }
}

/// Wait until a relay has forwarded everything it holds.
fn drain(sub: &LiveSub) {
    let deadline = Instant::now() + Duration::from_secs(1);
    let mut quiet_since: Option<Instant> = None;
    loop {
        let now = Instant::now();
        if sub.handle.pending() == 0 && !sub.binding.busy.load(Ordering::SeqCst) {
            if now - *quiet_since.get_or_insert(now) >= Duration::from_millis(30) {
                return;
            }
        } else {
            quiet_since = None;
        }
        if now >= deadline {
            return;
        }
        thread::sleep(Duration::from_millis(2));
    }
}

struct Live {
    spec: NodeSpec,
    plan: WrapPlan,
    state: NodeState,
    mode: WrapMode,
    /// Whether alias changes go to the broker. Off until a launched base
    /// exists, since it installs its own aliases at startup.
    install_aliases: bool,
    subs: BTreeMap<TopicName, LiveSub>,
    timers: BTreeMap<u32, LiveTimer>,
    aliases: BTreeMap<TopicName, TopicName>,
    base: Option<ProcessHandle>,
}

/// A node connected to the broker. Changing its spec reconciles the
/// broker-side endpoints before the call returns. Dropping it stops it.
pub struct RunningNode {
    core: Arc<Core>,
    live: Mutex<Live>,
}

/// Actions taken so far in one reconcile, undone if a later step fails.
#[derive(Default)]
struct Undo {
    pubs: Vec<TopicName>,
    subs: Vec<TopicName>,
    aliases: Vec<(TopicName, Option<TopicName>)>,
}

impl RunningNode {
    fn create(rt: &Runtime, spec: NodeSpec, handlers: HashMap<TopicName, HostHandler>) -> Result<RunningNode, NodeError> {
        spec.validate()?;
        let plan = plan_wrap(&spec)?;
        check_refs(rt, &spec, &desired(&spec, &plan)?)?;
        let client = Client::connect(&rt.connector, &spec.name)?;
        let mode = match &spec.base {
            None => WrapMode::None,
            Some(b) => {
                if client.snapshot()?.node(&b.node).is_some() {
                    WrapMode::Attach
                } else {
                    WrapMode::Launch
                }
            }
        };
        let mut empty = NodeSpec::new(&spec.name)?;
        empty.base = spec.base.clone();
        let node = RunningNode {
            core: Arc::new(Core {
                name: spec.name.clone(),
                rt: rt.clone(),
                client,
                pubs: RwLock::default(),
                host: RwLock::new(handlers),
                log: Mutex::default(),
                counters: Counters::default(),
            }),
            live: Mutex::new(Live {
                plan: plan_wrap(&empty)?,
                spec: empty,
                state: NodeState::Running,
                mode,
                install_aliases: mode == WrapMode::Attach,
                subs: BTreeMap::new(),
                timers: BTreeMap::new(),
                aliases: BTreeMap::new(),
                base: None,
            }),
        };
        for (k, v) in &spec.params {
            let _ = rt.params.set(k, *v);
        }
        {
            let mut live = node.live.lock();
            node.reconcile(&mut live, &spec)?;
            live.spec = spec.clone();
            live.plan = plan.clone();
            if mode == WrapMode::Launch {
                let base = node.launch_base(&spec, &plan)?;
                live.base = Some(base);
                live.aliases = plan.aliases.clone();
                live.install_aliases = true;
            }
        }
        Ok(node)
    }

    fn launch_base(&self, spec: &NodeSpec, plan: &WrapPlan) -> Result<ProcessHandle, NodeError> {
        use crate::launcher::LaunchError;
        let base = spec.base.as_ref().expect("launch mode has a base");
        let launcher = self.core.rt.launcher.as_ref().ok_or_else(|| {
            LaunchError::LaunchFailure(format!("{} is not running and no launcher is configured", base.node))
        })?;
        let uri = self.core.rt.connector.uri().ok_or_else(|| {
            LaunchError::LaunchFailure("launching a base node needs a TCP broker".to_string())
        })?;
        let path = launcher.resolve(&base.package, &base.node)?;
        let req = SpawnRequest {
            path,
            name: base.node.clone(),
            package: base.package.clone(),
            node: base.node.clone(),
            aliases: plan.aliases.iter().map(|(e, i)| (e.clone(), i.clone())).collect(),
            broker_uri: uri.to_string(),
            args: vec![],
            env: vec![(TIME_SCALE_ENV.to_string(), self.core.rt.time_scale.to_string())],
        };
        Ok(launcher.spawn(&req, &self.core.client)?)
    }

    pub fn name(&self) -> &str {
        &self.core.name
    }

    pub fn spec(&self) -> NodeSpec {
        self.live.lock().spec.clone()
    }

    pub fn plan(&self) -> WrapPlan {
        self.live.lock().plan.clone()
    }

    pub fn state(&self) -> NodeState {
        self.live.lock().state
    }

    pub fn mode(&self) -> WrapMode {
        self.live.lock().mode
    }

    pub fn base_process(&self) -> Option<ProcessHandle> {
        self.live.lock().base.clone()
    }

    pub fn client(&self) -> &Client {
        &self.core.client
    }

    pub fn stats(&self) -> NodeStats {
        let c = &self.core.counters;
        NodeStats {
            handled: c.handled.load(Ordering::Relaxed),
            published: c.published.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
            timer_ticks: c.timer_ticks.load(Ordering::Relaxed),
        }
    }

    /// The last `n` lines of pipeline log output and handler errors.
    pub fn logs(&self, n: usize) -> Vec<String> {
        let log = self.core.log.lock();
        log.iter().skip(log.len().saturating_sub(n)).cloned().collect()
    }

    pub fn set_host_handler(&self, topic: &str, handler: HostHandler) -> Result<(), NodeError> {
        let t = TopicName::parse(topic).map_err(|_| NodeError::InvalidTopic(topic.to_string()))?;
        self.core.host.write().insert(t, handler);
        Ok(())
    }

    /// Publish one message on a topic this node publishes.
    pub fn write(&self, topic: &str, msg: &MessageValue) -> Result<u64, NodeError> {
        self.running()?;
        self.core.write(topic, Payload::Typed(msg.clone()), None)
    }

    pub fn write_raw(&self, topic: &str, bytes: Bytes) -> Result<u64, NodeError> {
        self.running()?;
        self.core.write(topic, Payload::Raw(RawPayload { bytes, schema_hint: None }), None)
    }

    fn running(&self) -> Result<(), NodeError> {
        match self.live.lock().state {
            NodeState::Running => Ok(()),
            NodeState::Stopped => Err(NodeError::Stopped(self.core.name.clone())),
        }
    }

    /// Apply `f` to a copy of the spec and reconcile. On any error the
    /// node keeps its previous spec and wiring.
    pub fn modify<T>(&self, f: impl FnOnce(&mut NodeSpec) -> Result<T, NodeError>) -> Result<T, NodeError> {
        let mut live = self.live.lock();
        if live.state == NodeState::Stopped {
            return Err(NodeError::Stopped(self.core.name.clone()));
        }
        let mut next = live.spec.clone();
        let out = f(&mut next)?;
        if next.name != live.spec.name || next.base != live.spec.base {
            return Err(NodeError::Invalid("the name and base of a running node are fixed".into()));
        }
        next.validate()?;
        self.reconcile(&mut live, &next)?;
        live.plan = plan_wrap(&next)?;
        live.spec = next;
        Ok(out)
    }

    pub fn add_subscription(
        &self,
        set: EndpointSet,
        topic: &str,
        schema: Option<&str>,
        pipeline: Option<&str>,
    ) -> Result<EndpointId, NodeError> {
        self.modify(|s| s.add_endpoint(set, Direction::Subscribe, topic, schema, pipeline))
    }

    pub fn add_publication(&self, set: EndpointSet, topic: &str, schema: Option<&str>) -> Result<EndpointId, NodeError> {
        self.modify(|s| s.add_endpoint(set, Direction::Publish, topic, schema, None))
    }

    pub fn remove_endpoint(&self, set: EndpointSet, direction: Direction, topic: &str) -> Result<(), NodeError> {
        self.modify(|s| s.remove_endpoint(set, direction, topic))
    }

    pub fn add_replace(&self, from: &str, to: &str, pipeline: &str, schema: Option<&str>) -> Result<(), NodeError> {
        self.modify(|s| s.add_replace(from, to, pipeline, schema).map(|_| ()))
    }

    pub fn remove_replace(&self, from: &str) -> Result<(), NodeError> {
        self.modify(|s| s.remove_replace(from))
    }

    pub fn add_timer(&self, period: f64, pipeline: &str) -> Result<u32, NodeError> {
        self.modify(|s| s.add_timer(period, pipeline))
    }

    pub fn remove_timer(&self, id: u32) -> Result<(), NodeError> {
        self.modify(|s| s.remove_timer(id))
    }

    /// Remove all interception: aliases go first, then relays drain and
    /// close. The base keeps running. Calling it again does nothing.
    pub fn unwrap(&self) -> Result<(), NodeError> {
        self.modify(|s| {
            s.reuse = Default::default();
            s.replace.clear();
            Ok(())
        })
    }

    /// Stop timers and handlers and leave the broker. A base the node
    /// launched is stopped too; an attached base gets its aliases back.
    pub fn stop(&self) {
        let mut live = self.live.lock();
        if live.state == NodeState::Stopped {
            return;
        }
        live.state = NodeState::Stopped;
        for (_, mut t) in std::mem::take(&mut live.timers) {
            t.ticker.stop();
        }
        if let Some(base) = live.base.take() {
            base.stop(DEFAULT_GRACE);
        } else if live.install_aliases {
            if let Some(b) = &live.plan.base {
                for ext in live.aliases.keys() {
                    if let Err(e) = self.core.client.clear_alias(b, ext) {
                        log::warn!("[{}] clearing alias {ext}: {e}", self.core.name);
                    }
                }
            }
        }
        live.aliases.clear();
        for (_, s) in std::mem::take(&mut live.subs) {
            let _ = self.core.client.unsubscribe(&s.handle);
        }
        self.core.pubs.write().clear();
        self.core.host.write().clear();
        self.core.client.close();
    }

    fn reconcile(&self, live: &mut Live, next: &NodeSpec) -> Result<(), NodeError> {
        let rt = &self.core.rt;
        let plan = plan_wrap(next)?;
        let want = desired(next, &plan)?;
        check_refs(rt, next, &want)?;
        let mut undo = Undo::default();
        if let Err(e) = self.grow(live, &want, &plan, &mut undo) {
            self.rollback(live, undo, &plan);
            return Err(e);
        }
        self.shrink(live, &want, &plan);
        self.sync_timers(live, next)?;
        Ok(())
    }

    /// Additions and in-place updates, in an order that never exposes a
    /// half-built route: publications, then subscriptions, then aliases.
    fn grow(&self, live: &mut Live, want: &Desired, plan: &WrapPlan, undo: &mut Undo) -> Result<(), NodeError> {
        let client = &self.core.client;
        for (t, schema) in &want.pubs {
            let existing = self.core.pubs.read().get(t).cloned();
            match existing {
                Some(p) if p.schema == *schema => {}
                Some(p) => {
                    client.unadvertise(&p)?;
                    self.core.pubs.write().remove(t);
                    let h = client.advertise(t, schema.as_deref())?;
                    self.core.pubs.write().insert(t.clone(), h);
                }
                None => {
                    let h = client.advertise(t, schema.as_deref())?;
                    self.core.pubs.write().insert(t.clone(), h);
                    undo.pubs.push(t.clone());
                }
            }
        }
        for (t, (schema, route)) in &want.subs {
            if let Some(s) = live.subs.get(t) {
                if s.binding.schema == *schema {
                    *s.binding.route.write() = route.clone();
                    continue;
                }
                let old = live.subs.remove(t).expect("present");
                client.unsubscribe(&old.handle)?;
            }
            let binding = Arc::new(Binding {
                topic: t.clone(),
                schema: schema.clone(),
                route: RwLock::new(route.clone()),
                busy: AtomicBool::new(false),
            });
            let (core, b) = (self.core.clone(), binding.clone());
            let handler: Handler = Arc::new(move |d: &Delivery| handle(&core, &b, d));
            let handle = client.subscribe_with(t, schema.as_deref(), handler)?;
            live.subs.insert(t.clone(), LiveSub { handle, binding });
            undo.subs.push(t.clone());
        }
        if live.install_aliases {
            if let Some(base) = &plan.base {
                for (ext, int) in &want.aliases {
                    let prev = live.aliases.get(ext).cloned();
                    if prev.as_ref() == Some(int) {
                        continue;
                    }
                    client.set_alias(base, ext, int)?;
                    live.aliases.insert(ext.clone(), int.clone());
                    undo.aliases.push((ext.clone(), prev));
                }
            }
        }
        Ok(())
    }

    fn rollback(&self, live: &mut Live, undo: Undo, plan: &WrapPlan) {
        let client = &self.core.client;
        if let Some(base) = &plan.base {
            for (ext, prev) in undo.aliases.into_iter().rev() {
                let r = match &prev {
                    Some(int) => client.set_alias(base, &ext, int),
                    None => client.clear_alias(base, &ext),
                };
                if let Err(e) = r {
                    log::warn!("[{}] rollback of alias {ext}: {e}", self.core.name);
                }
                match prev {
                    Some(int) => live.aliases.insert(ext, int),
                    None => live.aliases.remove(&ext),
                };
            }
        }
        for t in undo.subs {
            if let Some(s) = live.subs.remove(&t) {
                let _ = client.unsubscribe(&s.handle);
            }
        }
        for t in undo.pubs {
            if let Some(p) = self.core.pubs.write().remove(&t) {
                let _ = client.unadvertise(&p);
            }
        }
        // Routes updated in place are restored by re-running with the
        // current spec; it only performs in-place updates now.
        let spec = live.spec.clone();
        if let Some(want) = plan_wrap(&spec).ok().and_then(|p| desired(&spec, &p).ok()) {
            for (t, (_, route)) in &want.subs {
                if let Some(s) = live.subs.get(t) {
                    *s.binding.route.write() = route.clone();
                }
            }
        }
    }

    /// Removals, in the reverse order of `grow`: aliases first so the
    /// base stops feeding relays, then relays drain and close.
    fn shrink(&self, live: &mut Live, want: &Desired, plan: &WrapPlan) {
        let client = &self.core.client;
        let base = plan.base.clone().or_else(|| live.plan.base.clone());
        let stale: Vec<TopicName> = live.aliases.keys().filter(|e| !want.aliases.contains_key(*e)).cloned().collect();
        for ext in stale {
            if live.install_aliases {
                if let Some(b) = &base {
                    if let Err(e) = client.clear_alias(b, &ext) {
                        self.core.fail(format!("clearing alias {ext}: {e}"));
                    }
                }
            }
            live.aliases.remove(&ext);
        }
        let stale: Vec<TopicName> = live.subs.keys().filter(|t| !want.subs.contains_key(*t)).cloned().collect();
        for t in stale {
            let s = live.subs.remove(&t).expect("present");
            if s.binding.route.read().relay_to.is_some() {
                drain(&s);
            }
            if let Err(e) = client.unsubscribe(&s.handle) {
                self.core.fail(format!("unsubscribing {t}: {e}"));
            }
        }
        let stale: Vec<TopicName> = self.core.pubs.read().keys().filter(|t| !want.pubs.contains_key(*t)).cloned().collect();
        for t in stale {
            if let Some(p) = self.core.pubs.write().remove(&t) {
                if let Err(e) = client.unadvertise(&p) {
                    self.core.fail(format!("unadvertising {t}: {e}"));
                }
            }
        }
    }

    fn sync_timers(&self, live: &mut Live, next: &NodeSpec) -> Result<(), NodeError> {
        let stale: Vec<u32> = live
            .timers
            .iter()
            .filter(|(id, t)| next.timers.get(id).is_none_or(|n| n.period != t.period))
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            if let Some(mut t) = live.timers.remove(&id) {
                t.ticker.stop();
            }
        }
        for (id, spec) in &next.timers {
            if let Some(t) = live.timers.get(id) {
                *t.pipeline.write() = spec.pipeline.clone();
                continue;
            }
            let pipeline = Arc::new(RwLock::new(spec.pipeline.clone()));
            let (core, p) = (self.core.clone(), pipeline.clone());
            let period = self.core.rt.scaled(spec.period);
            let ticker = Ticker::start(format!("nw-timer-{}-{id}", self.core.name), period, move || tick(&core, &p))
                .map_err(|e| NodeError::Invalid(format!("cannot start timer: {e}")))?;
            live.timers.insert(*id, LiveTimer { period: spec.period, pipeline, ticker });
        }
        Ok(())
    }
}

impl Drop for RunningNode {
    fn drop(&mut self) {
        self.stop();
    }
}
