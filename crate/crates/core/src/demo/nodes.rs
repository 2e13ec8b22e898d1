//! The demo node processes. Each one joins the broker under its own name,
//! installs any aliases it was launched with, and runs until `stop` is set.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;

use super::model::{goal_controller, unicycle_step, Gains, UnicyclePose};
use super::DemoError;
use crate::bus::{Client, Connector, Delivery, PublicationHandle, TopicName};
use crate::node::Ticker;
use crate::schema::{decode, encode, FieldPath, Layout, MessageValue, SchemaRegistry, Value};

pub const NODE_KINDS: &[&str] = &["turtle_sim", "kobuki_sim", "move_base", "actuator", "counter"];

/// Simulation step in simulated seconds.
pub const SIM_DT: f64 = 0.01;
/// Physics steps between pose publications.
const POSE_EVERY: u64 = 10;
/// A simulator halts when no command arrived for this many steps.
const CMD_TIMEOUT_STEPS: u64 = 100;

#[derive(Debug, Clone)]
pub struct NodeOptions {
    pub kind: String,
    pub name: String,
    pub connector: Connector,
    pub aliases: Vec<(TopicName, TopicName)>,
    pub time_scale: f64,
    pub gains: Gains,
    /// Counter: messages per simulated second.
    pub rate: f64,
    /// Counter: stop publishing after this many.
    pub count: Option<u64>,
    /// Counter: filler bytes per message.
    pub payload_bytes: usize,
}

impl NodeOptions {
    pub fn new(kind: &str, name: &str, connector: Connector) -> NodeOptions {
        NodeOptions {
            kind: kind.to_string(),
            name: name.to_string(),
            connector,
            aliases: Vec::new(),
            time_scale: 1.0,
            gains: Gains::default(),
            rate: 100.0,
            count: None,
            payload_bytes: 16,
        }
    }
}

/// Run a demo node until `stop` becomes true.
pub fn run_node(opts: &NodeOptions, stop: &AtomicBool) -> Result<(), DemoError> {
    if !NODE_KINDS.contains(&opts.kind.as_str()) {
        return Err(DemoError::UnknownKind(opts.kind.clone()));
    }
    let client = Client::connect(&opts.connector, &opts.name)?;
    for (ext, int) in &opts.aliases {
        client.set_alias(&opts.name, ext, int)?;
    }
    let io = Io { client: client.clone(), schemas: Arc::new(SchemaRegistry::with_builtins()), scale: opts.time_scale };
    let tickers = match opts.kind.as_str() {
        "turtle_sim" => turtle_sim(&io)?,
        "kobuki_sim" => kobuki_sim(&io)?,
        "move_base" => move_base(&io, opts.gains)?,
        "actuator" => actuator(&io)?,
        _ => counter(&io, opts)?,
    };
    while !stop.load(Ordering::SeqCst) && client.is_connected() {
        thread::sleep(Duration::from_millis(10));
    }
    drop(tickers);
    client.close();
    Ok(())
}

struct Io {
    client: Client,
    schemas: Arc<SchemaRegistry>,
    scale: f64,
}

/// A typed publication.
#[derive(Clone)]
struct Out {
    client: Client,
    handle: PublicationHandle,
    layout: Arc<Layout>,
}

impl Out {
    fn blank(&self) -> MessageValue {
        self.layout.zero_message()
    }

    fn send(&self, m: &MessageValue) {
        let sent = encode(&self.layout, m)
            .map_err(|e| e.to_string())
            .and_then(|b| self.client.publish(&self.handle, b.into(), None).map_err(|e| e.to_string()));
        if let Err(e) = sent {
            log::warn!("{}: publish on {} failed: {e}", self.client.name(), self.handle.topic);
        }
    }
}

impl Io {
    fn topic(text: &str) -> TopicName {
        TopicName::parse(text).expect("demo topics are valid")
    }

    fn layout(&self, schema: &str) -> Arc<Layout> {
        self.schemas.layout(schema).expect("builtin schema")
    }

    fn advertise(&self, topic: &str, schema: &str) -> Result<Out, DemoError> {
        let handle = self.client.advertise(&Self::topic(topic), Some(schema))?;
        Ok(Out { client: self.client.clone(), handle, layout: self.layout(schema) })
    }

    fn subscribe(
        &self,
        topic: &str,
        schema: &str,
        f: impl Fn(&Layout, MessageValue) + Send + Sync + 'static,
    ) -> Result<(), DemoError> {
        let layout = self.layout(schema);
        let name = self.client.name().to_string();
        let handler = Arc::new(move |d: &Delivery| match decode(&layout, &d.envelope.payload) {
            Ok(m) => f(&layout, m),
            Err(e) => log::warn!("{name}: undecodable message on {}: {e}", d.topic),
        });
        self.client.subscribe_with(&Self::topic(topic), Some(schema), handler)?;
        Ok(())
    }

    /// Ticker with a period in simulated seconds.
    fn every(&self, sim_period: f64, f: impl FnMut() + Send + 'static) -> Result<Ticker, DemoError> {
        let name = format!("{}-tick", self.client.name());
        Ticker::start(name, Duration::from_secs_f64(sim_period / self.scale), f).map_err(|e| DemoError::Io(e.to_string()))
    }
}

pub(crate) fn num(layout: &Layout, m: &MessageValue, path: &str) -> f64 {
    let p = layout.resolve(&FieldPath::parse(path).expect("static path")).expect("path in schema");
    m.get(&p).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

pub(crate) fn set_num(layout: &Layout, m: &mut MessageValue, path: &str, v: f64) {
    let p = layout.resolve(&FieldPath::parse(path).expect("static path")).expect("path in schema");
    if let Some(slot) = m.get_mut(&p) {
        slot.assign_f64(v);
    }
}

fn set_str(layout: &Layout, m: &mut MessageValue, path: &str, v: &str) {
    let p = layout.resolve(&FieldPath::parse(path).expect("static path")).expect("path in schema");
    if let Some(slot) = m.get_mut(&p) {
        *slot = Value::Str(v.to_string());
    }
}

#[derive(Default)]
struct Plant {
    pose: UnicyclePose,
    cmd: (f64, f64),
    idle_steps: u64,
    steps: u64,
}

/// Shared simulator loop: integrate at 100 Hz, call `publish` at 10 Hz.
fn simulate(io: &Io, cmd_topic: &str, mut publish: impl FnMut(&UnicyclePose) + Send + 'static) -> Result<Vec<Ticker>, DemoError> {
    let plant = Arc::new(Mutex::new(Plant::default()));
    let p = plant.clone();
    io.subscribe(cmd_topic, "Twist", move |l, m| {
        let (v, w) = (num(l, &m, "linear.x"), num(l, &m, "angular.z"));
        let mut plant = p.lock();
        plant.cmd = (v, w);
        plant.idle_steps = 0;
    })?;
    let name = io.client.name().to_string();
    let ticker = io.every(SIM_DT, move || {
        let mut s = plant.lock();
        s.idle_steps += 1;
        if s.idle_steps > CMD_TIMEOUT_STEPS {
            s.cmd = (0.0, 0.0);
        }
        match unicycle_step(&s.pose, s.cmd.0, s.cmd.1, SIM_DT) {
            Ok(next) => s.pose = next,
            Err(e) => log::warn!("{name}: holding pose: {e}"),
        }
        s.steps += 1;
        if s.steps % POSE_EVERY == 0 {
            let pose = s.pose;
            drop(s);
            publish(&pose);
        }
    })?;
    Ok(vec![ticker])
}

fn pose_message(out: &Out, pose: &UnicyclePose) -> MessageValue {
    let l = &out.layout;
    let mut m = out.blank();
    set_num(l, &mut m, "x", pose.x);
    set_num(l, &mut m, "y", pose.y);
    set_num(l, &mut m, "theta", pose.theta);
    set_num(l, &mut m, "linear_velocity", pose.linear_velocity);
    set_num(l, &mut m, "angular_velocity", pose.angular_velocity);
    m
}

fn turtle_sim(io: &Io) -> Result<Vec<Ticker>, DemoError> {
    let out = io.advertise("/turtle1/pose", "Pose")?;
    simulate(io, "/turtle1/cmd_vel", move |pose| out.send(&pose_message(&out, pose)))
}

fn transform(layout: &Layout, frame: &str, child: &str, x: f64, y: f64, theta: f64) -> Value {
    let mut m = layout.zero_message();
    set_str(layout, &mut m, "frame", frame);
    set_str(layout, &mut m, "child_frame", child);
    set_num(layout, &mut m, "x", x);
    set_num(layout, &mut m, "y", y);
    set_num(layout, &mut m, "theta", theta);
    Value::Struct(m.fields)
}

fn kobuki_sim(io: &Io) -> Result<Vec<Ticker>, DemoError> {
    let odom = io.advertise("/odom", "Pose")?;
    let tf = io.advertise("/tf", "TFMessage")?;
    let tf_static = io.advertise("/tf_static", "TFMessage")?;
    let tl = io.layout("Transform");
    let mut fixed = tf_static.blank();
    fixed.fields[0] = Value::List(vec![transform(&tl, "base_footprint", "base_link", 0.0, 0.0, 0.0)]);
    tf_static.send(&fixed);
    simulate(io, "/mobile_base/commands/velocity", move |pose| {
        odom.send(&pose_message(&odom, pose));
        let mut m = tf.blank();
        m.fields[0] = Value::List(vec![transform(&tl, "odom", "base_footprint", pose.x, pose.y, pose.theta)]);
        tf.send(&m);
    })
}

#[derive(Default)]
struct Planner {
    pose: Option<UnicyclePose>,
    goal: Option<(f64, f64)>,
}

/// Goal seeker: tracks the robot through `/tf`, steers toward the last
/// goal and publishes `/cmd_vel` at 10 Hz while a goal is active.
fn move_base(io: &Io, gains: Gains) -> Result<Vec<Ticker>, DemoError> {
    let cmd = io.advertise("/cmd_vel", "Twist")?;
    let current = io.advertise("/move_base/current_goal", "PoseStamped")?;
    let action = io.advertise("/move_base/goal", "MoveBaseActionGoal")?;
    let state = Arc::new(Mutex::new(Planner::default()));

    let s = state.clone();
    io.subscribe("/move_base_simple/goal", "PoseStamped", move |l, m| {
        s.lock().goal = Some((num(l, &m, "x"), num(l, &m, "y")));
        current.send(&m);
        let mut a = action.blank();
        a.fields[0] = Value::Struct(m.fields);
        action.send(&a);
    })?;
    let s = state.clone();
    io.subscribe("/tf", "TFMessage", move |l, m| {
        let Some(Value::List(ts)) = m.fields.first() else { return };
        for (k, t) in ts.iter().enumerate() {
            if let Value::Struct(f) = t {
                if matches!(f.get(1), Some(Value::Str(c)) if c == "base_footprint") {
                    let at = |field: &str| num(l, &m, &format!("transforms[{k}].{field}"));
                    let pose = UnicyclePose { x: at("x"), y: at("y"), theta: at("theta"), ..Default::default() };
                    s.lock().pose = Some(pose);
                }
            }
        }
    })?;
    io.subscribe("/tf_static", "TFMessage", |_, _| {})?;

    let ticker = io.every(0.1, move || {
        let (pose, goal) = {
            let s = state.lock();
            (s.pose, s.goal)
        };
        let (Some(pose), Some(goal)) = (pose, goal) else { return };
        let (v, w) = goal_controller(&pose, goal, &gains);
        let mut m = cmd.blank();
        set_num(&cmd.layout, &mut m, "linear.x", v);
        set_num(&cmd.layout, &mut m, "angular.z", w);
        cmd.send(&m);
        if v == 0.0 && w == 0.0 {
            state.lock().goal = None;
        }
    })?;
    Ok(vec![ticker])
}

/// Applies each command it receives and reports it on `/actuator/state`.
fn actuator(io: &Io) -> Result<Vec<Ticker>, DemoError> {
    let state = io.advertise("/actuator/state", "Twist")?;
    io.subscribe("/actuator/command", "Twist", move |_, m| state.send(&m))?;
    Ok(vec![])
}

fn counter(io: &Io, opts: &NodeOptions) -> Result<Vec<Ticker>, DemoError> {
    let out = io.advertise("/counter", "Numbered")?;
    let (limit, extra) = (opts.count, opts.payload_bytes);
    let mut index: u64 = 0;
    let rate = if opts.rate > 0.0 { opts.rate } else { 100.0 };
    let ticker = io.every(1.0 / rate, move || {
        if limit.is_some_and(|n| index >= n) {
            return;
        }
        let mut m = out.blank();
        m.fields[0] = Value::I64(index as i64);
        m.fields[1] = Value::List((0..extra).map(|i| Value::U8((index as usize + i) as u8)).collect());
        out.send(&m);
        index += 1;
    })?;
    Ok(vec![ticker])
}
