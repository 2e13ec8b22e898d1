//! Scripted end-to-end runs. Everything after setup goes through the
//! control API, so a scenario is also an integration test of the stack.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{json, Map, Value as Json};

use super::model::fit_circle;
use crate::bus::{Broker, BrokerServer, Connector};
use crate::launcher::{Launcher, PackageRegistry};
use crate::node::Runtime;
use crate::shell::{ApiClient, ApiServer, ClientError, Controller};

pub const SCENARIOS: &[&str] = &["turtle-circle", "kobuki-override", "safety-clamp"];

/// Turtle-circle command, straight from the interactive example.
pub const CIRCLE_V: f64 = 2.0;
pub const CIRCLE_W: f64 = 1.8;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("setup failed: {0}")]
    Setup(String),
}

impl From<ClientError> for ScenarioError {
    fn from(e: ClientError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub passed: bool,
    pub wall_seconds: f64,
    pub metrics: Map<String, Json>,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    fn new(name: &str) -> ScenarioReport {
        ScenarioReport { scenario: name.to_string(), passed: true, wall_seconds: 0.0, metrics: Map::new(), checks: vec![] }
    }

    fn metric(&mut self, key: &str, v: impl Into<Json>) {
        self.metrics.insert(key.to_string(), v.into());
    }

    fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.passed &= pass;
        self.checks.push(Check { name: name.to_string(), pass, detail: detail.into() });
    }

    pub fn text(&self) -> String {
        let mut s = format!("scenario {}: {}\n", self.scenario, if self.passed { "PASS" } else { "FAIL" });
        s.push_str(&format!("  wall time {:.3} s\n", self.wall_seconds));
        for (k, v) in &self.metrics {
            s.push_str(&format!("  {k} = {v}\n"));
        }
        for c in &self.checks {
            s.push_str(&format!("  [{}] {}: {}\n", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail));
        }
        s
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    /// The `nodewrap` executable the demo packages run.
    pub exe: PathBuf,
    /// Use this broker instead of starting one in-process.
    pub broker: Option<String>,
    /// Override the scenario's simulated-time acceleration.
    pub time_scale: Option<f64>,
}

impl ScenarioOptions {
    pub fn new(exe: impl Into<PathBuf>) -> ScenarioOptions {
        ScenarioOptions { exe: exe.into(), broker: None, time_scale: None }
    }
}

/// Broker, demo packages, executor and control API, torn down on drop.
pub struct Harness {
    api: Option<ApiServer>,
    controller: Arc<Controller>,
    server: Option<BrokerServer>,
    _packages: tempfile::TempDir,
}

impl Harness {
    pub fn start(exe: &Path, broker: Option<&str>, time_scale: f64) -> Result<Harness, ScenarioError> {
        let packages = tempfile::tempdir().map_err(|e| ScenarioError::Setup(e.to_string()))?;
        super::install(packages.path(), exe).map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let (server, uri) = match broker {
            Some(uri) => (None, uri.to_string()),
            None => {
                let s = BrokerServer::bind("127.0.0.1:0", Broker::new()).map_err(|e| ScenarioError::Setup(e.to_string()))?;
                let uri = s.uri();
                (Some(s), uri)
            }
        };
        let mut rt = Runtime::new(Connector::Tcp(uri.clone()))
            .with_launcher(Launcher::new(PackageRegistry::scan(vec![packages.path().to_path_buf()])));
        rt.time_scale = time_scale;
        let controller =
            Controller::new(rt, "nw_scenario").map_err(|e| ScenarioError::BrokerUnreachable(format!("{uri}: {}", e.message)))?;
        let api = ApiServer::bind("127.0.0.1:0", controller.clone()).map_err(|e| ScenarioError::Setup(e.to_string()))?;
        Ok(Harness { api: Some(api), controller, server, _packages: packages })
    }

    pub fn client(&self) -> Result<ApiClient, ScenarioError> {
        Ok(ApiClient::connect(&self.api.as_ref().expect("running").url())?)
    }

    pub fn controller(&self) -> &Arc<Controller> {
        &self.controller
    }
}

impl Drop for Harness {
    fn drop(&mut self) {
        if let Some(mut api) = self.api.take() {
            api.shutdown();
        }
        self.controller.shutdown();
        if let Some(mut s) = self.server.take() {
            s.shutdown();
        }
    }
}

pub fn run_scenario(name: &str, opts: &ScenarioOptions) -> Result<ScenarioReport, ScenarioError> {
    let (scale, run): (f64, fn(&mut ApiClient, f64, &mut ScenarioReport) -> Result<(), ScenarioError>) = match name {
        "turtle-circle" => (20.0, turtle_circle),
        "kobuki-override" => (10.0, kobuki_override),
        "safety-clamp" => (10.0, safety_clamp),
        other => return Err(ScenarioError::Unknown(other.to_string())),
    };
    let scale = opts.time_scale.unwrap_or(scale);
    let started = Instant::now();
    let harness = Harness::start(&opts.exe, opts.broker.as_deref(), scale)?;
    let mut api = harness.client()?;
    let mut report = ScenarioReport::new(name);
    report.metric("time_scale", scale);
    run(&mut api, scale, &mut report)?;
    api.close();
    drop(harness);
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn call(api: &mut ApiClient, op: &str, args: Json) -> Result<Json, ScenarioError> {
    api.request(op, args).map_err(|e| ScenarioError::Setup(format!("{op}: {e}")))
}

/// Run REPL-equivalent requests in order.
fn script(api: &mut ApiClient, steps: &[(&str, Json)]) -> Result<(), ScenarioError> {
    for (op, args) in steps {
        call(api, op, args.clone())?;
    }
    Ok(())
}

fn take(api: &mut ApiClient, id: u64) -> Result<Vec<Json>, ScenarioError> {
    let r = call(api, "capture.take", json!({ "id": id }))?;
    Ok(r["items"].as_array().cloned().unwrap_or_default())
}

fn field(item: &Json, path: &str) -> f64 {
    item["fields"][path].as_f64().unwrap_or(f64::NAN)
}

fn sleep_sim(seconds: f64, scale: f64) {
    thread::sleep(Duration::from_secs_f64(seconds / scale));
}

/// A 1 Hz timer drives the turtle in a circle; fit the pose trajectory.
fn turtle_circle(api: &mut ApiClient, scale: f64, r: &mut ScenarioReport) -> Result<(), ScenarioError> {
    const SIM_SECONDS: f64 = 60.0;
    let t0 = Instant::now();
    call(api, "process.launch", json!({ "package": "demo", "node": "turtle_sim", "name": "turtlesim" }))?;
    let cap = call(api, "capture.start", json!({ "topic": "/turtle1/pose", "fields": ["x", "y", "theta"] }))?["id"]
        .as_u64()
        .unwrap_or(0);
    let node = "turtle_control_node";
    script(
        api,
        &[
            (
                "pipeline.define",
                json!({ "text": format!("pipeline circle {{ emit Twist{{linear.x := {CIRCLE_V:?}, angular.z := {CIRCLE_W:?}}} to /turtle1/cmd_vel }}") }),
            ),
            ("node.declare", json!({ "name": node })),
            ("node.endpoint", json!({ "node": node, "set": "new", "direction": "publish", "topic": "/turtle1/cmd_vel", "type": "Twist" })),
            ("node.endpoint", json!({ "node": node, "set": "new", "direction": "subscribe", "topic": "/turtle1/pose", "type": "Pose" })),
            ("node.timer", json!({ "node": node, "period": 1.0, "pipeline": "circle" })),
            ("node.create", json!({ "node": node })),
        ],
    )?;
    // Poses arrive at 10 Hz simulated; wait for a minute of them after
    // the turtle starts moving.
    let want = (SIM_SECONDS * 10.0) as usize;
    let deadline = Instant::now() + Duration::from_secs_f64(3.0 * SIM_SECONDS / scale + 5.0);
    let mut poses: Vec<(f64, f64)> = Vec::new();
    let mut moving = 0usize;
    while moving < want && Instant::now() < deadline {
        sleep_sim(1.0, scale);
        for item in take(api, cap)? {
            poses.push((field(&item, "x"), field(&item, "y")));
        }
        let first = poses.first().copied();
        moving = poses.iter().skip_while(|p| Some(**p) == first).count();
    }
    call(api, "node.stop", json!({ "node": node }))?;
    call(api, "capture.stop", json!({ "id": cap }))?;
    let first = poses.first().copied();
    let start = poses.iter().position(|p| Some(*p) != first).unwrap_or(0).saturating_sub(1);
    let track: Vec<(f64, f64)> = poses[start..].iter().take(want + 1).copied().collect();
    let expected = (CIRCLE_V / CIRCLE_W).abs();
    r.metric("poses", track.len());
    r.metric("simulated_seconds", track.len().saturating_sub(1) as f64 / 10.0);
    r.metric("expected_radius", expected);
    r.check("minute of poses", track.len() > want, format!("{} poses (want {})", track.len(), want + 1));
    match fit_circle(&track) {
        Some(fit) => {
            r.metric("fitted_radius", fit.radius);
            r.metric("center", json!([fit.cx, fit.cy]));
            r.metric("max_radial_deviation", fit.max_deviation);
            r.check("radius", (fit.radius - expected).abs() <= 1e-3, format!("{} vs {expected} (tol 1e-3)", fit.radius));
            r.check("radial deviation", fit.max_deviation <= 1e-6, format!("{:e} m (tol 1e-6)", fit.max_deviation));
        }
        None => r.check("radius", false, "trajectory too degenerate to fit"),
    }
    let elapsed = t0.elapsed().as_secs_f64();
    r.metric("run_seconds", elapsed);
    r.check("wall clock", elapsed <= 5.0, format!("{elapsed:.3} s (limit 5 s)"));
    Ok(())
}

/// Wrap a running goal seeker, relay, swap to the speed override live,
/// then raise the speed.
fn kobuki_override(api: &mut ApiClient, scale: f64, r: &mut ScenarioReport) -> Result<(), ScenarioError> {
    let node = "experimental_move_base";
    let out = "/mobile_base/commands/velocity";
    call(api, "process.launch", json!({ "package": "demo", "node": "kobuki_sim", "name": "kobuki" }))?;
    call(api, "process.launch", json!({ "package": "move_base", "node": "move_base" }))?;
    script(
        api,
        &[
            ("pipeline.define", json!({ "text": format!("pipeline relayVelocity {{ relay to {out} }}") })),
            (
                "pipeline.define",
                json!({ "text": format!("pipeline controlVelocity {{ expr {{ if msg.linear.x > 0 {{ msg.linear.x := param(\"speed\") }}; forward(\"{out}\") }} }}") }),
            ),
            ("param.set", json!({ "name": "speed", "value": 4.5 })),
            ("topic.pub", json!({ "topic": "/move_base_simple/goal", "message": "PoseStamped{x := 1000.0, y := 0.0}" })),
        ],
    )?;
    let cap = call(api, "capture.start", json!({ "topic": out, "fields": ["linear.x"] }))?["id"].as_u64().unwrap_or(0);
    let reuse = [
        ("publish", "/cmd_vel", "Twist"),
        ("publish", "/move_base/current_goal", "PoseStamped"),
        ("publish", "/move_base/goal", "MoveBaseActionGoal"),
        ("subscribe", "/tf_static", "TFMessage"),
        ("subscribe", "/move_base_simple/goal", "PoseStamped"),
        ("subscribe", "/tf", "TFMessage"),
    ];
    // Until the wrapper exists move_base drives the base directly on
    // /cmd_vel, which nothing relays yet.
    call(api, "node.declare", json!({ "name": node }))?;
    call(api, "node.base", json!({ "node": node, "package": "move_base", "base": "move_base" }))?;
    for (dir, topic, ty) in reuse {
        call(api, "node.endpoint", json!({ "node": node, "set": "reuse", "direction": dir, "topic": topic, "type": ty }))?;
    }
    script(
        api,
        &[
            (
                "node.endpoint",
                json!({ "node": node, "set": "new", "direction": "subscribe", "topic": "/cmd_vel", "type": "Twist", "pipeline": "relayVelocity" }),
            ),
            ("node.endpoint", json!({ "node": node, "set": "new", "direction": "publish", "topic": out, "type": "Twist" })),
        ],
    )?;
    let created = call(api, "node.create", json!({ "node": node }))?;
    r.metric("wrap_mode", created["mode"].clone());
    sleep_sim(3.0, scale);
    call(
        api,
        "node.endpoint",
        json!({ "node": node, "set": "new", "direction": "subscribe", "topic": "/cmd_vel", "type": "Twist", "pipeline": "controlVelocity" }),
    )?;
    sleep_sim(3.0, scale);
    let set = call(api, "param.set", json!({ "name": "speed", "value": 6.0 }))?;
    let (before, at) = (set["before_ns"].as_u64().unwrap_or(0), set["at_ns"].as_u64().unwrap_or(u64::MAX));
    sleep_sim(3.0, scale);
    let items = take(api, cap)?;
    call(api, "capture.stop", json!({ "id": cap }))?;
    let snapshot = call(api, "graph.get", json!({}))?;
    call(api, "node.stop", json!({ "node": node }))?;

    let xs: Vec<f64> = items.iter().map(|i| field(i, "linear.x")).collect();
    let ts: Vec<u64> = items.iter().map(|i| i["timestamp"].as_u64().unwrap_or(0)).collect();
    let origins: Vec<u64> = items.iter().map(|i| i["origin"]["seq"].as_u64().unwrap_or(0)).collect();
    let positive: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > 0.0).collect();
    r.metric("forwarded", xs.len());
    r.metric("relayed_identity", xs.iter().filter(|x| **x != 4.5 && **x != 6.0).count());
    r.metric("at_4_5", xs.iter().filter(|x| **x == 4.5).count());
    r.metric("at_6_0", xs.iter().filter(|x| **x == 6.0).count());
    r.metric("topics", json!(snapshot["topics"].as_array().map(|t| t.iter().map(|e| e["name"].clone()).collect::<Vec<_>>())));
    r.check("attached to running base", created["mode"] == "attach", format!("mode {}", created["mode"]));

    // Phases in stream order: identity values, then 4.5, then 6.0.
    let phase = |x: f64| if x == 6.0 { 2 } else if x == 4.5 { 1 } else { 0 };
    let phases: Vec<u8> = positive.iter().map(|&i| phase(xs[i])).collect();
    let monotone = phases.windows(2).all(|w| w[0] <= w[1]);
    let all_present = (0..3).all(|p| phases.contains(&p));
    r.check("identity then 4.5 then 6.0", monotone && all_present, format!("{} positive commands, phases monotone={monotone}", phases.len()));
    let early_ok = positive.iter().filter(|&&i| ts[i] < before).all(|&i| phase(xs[i]) < 2);
    let late: Vec<usize> = positive.iter().copied().filter(|&i| ts[i] > at).collect();
    let next_ok = late.first().is_some_and(|&i| xs[i] == 6.0) && late.iter().all(|&i| xs[i] == 6.0);
    r.check("4.5 until the change", early_ok, "every command forwarded before the change carries 4.5 or the identity value");
    r.check(
        "very next command carries 6.0",
        next_ok,
        late.first().map_or("no command after the change".to_string(), |&i| format!("first after change: {}", xs[i])),
    );
    let contiguous = origins.windows(2).all(|w| w[1] == w[0] + 1);
    let dup = {
        let mut o = origins.clone();
        o.sort_unstable();
        o.dedup();
        o.len() != origins.len()
    };
    r.check(
        "no loss or duplication across the swap",
        contiguous && !dup && !origins.is_empty(),
        format!("source seq {}..={}, {} forwarded", origins.first().unwrap_or(&0), origins.last().unwrap_or(&0), origins.len()),
    );
    Ok(())
}

/// Teleop asks for 6.0; a clamp wrapped around the actuator caps it at 5.
fn safety_clamp(api: &mut ApiClient, scale: f64, r: &mut ScenarioReport) -> Result<(), ScenarioError> {
    const WANT: usize = 1000;
    call(api, "process.launch", json!({ "package": "demo", "node": "actuator" }))?;
    let cap = call(api, "capture.start", json!({ "topic": "/actuator/state", "fields": ["linear.x"] }))?["id"].as_u64().unwrap_or(0);
    script(
        api,
        &[
            ("pipeline.define", json!({ "text": "pipeline request6 { emit Twist{linear.x := 6.0} to /actuator/command }" })),
            ("pipeline.define", json!({ "text": "pipeline clamp5 { clamp linear.x -5 5 }" })),
            ("node.declare", json!({ "name": "teleop" })),
            ("node.endpoint", json!({ "node": "teleop", "set": "new", "direction": "publish", "topic": "/actuator/command", "type": "Twist" })),
            ("node.timer", json!({ "node": "teleop", "period": 0.01, "pipeline": "request6" })),
            ("node.create", json!({ "node": "teleop" })),
        ],
    )?;
    sleep_sim(2.0, scale);
    let before = take(api, cap)?;
    let violation = before.iter().map(|i| field(i, "linear.x").abs()).fold(0.0, f64::max);
    r.metric("unguarded_messages", before.len());
    r.metric("unguarded_max_linear_x", violation);
    r.check("violation observed without the clamp", violation == 6.0, format!("max |linear.x| = {violation}"));

    let node = "safe_actuator";
    script(
        api,
        &[
            ("node.declare", json!({ "name": node })),
            ("node.base", json!({ "node": node, "package": "demo", "base": "actuator" })),
            (
                "node.endpoint",
                json!({ "node": node, "set": "reuse", "direction": "subscribe", "topic": "/actuator/command", "type": "Twist", "pipeline": "clamp5" }),
            ),
        ],
    )?;
    let created = call(api, "node.create", json!({ "node": node }))?;
    r.metric("wrap_mode", created["mode"].clone());
    // Let anything already in flight at the cutover drain.
    thread::sleep(Duration::from_millis(100));
    take(api, cap)?;
    let mut guarded: Vec<f64> = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    while guarded.len() < WANT && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(100));
        guarded.extend(take(api, cap)?.iter().map(|i| field(i, "linear.x")));
    }
    call(api, "capture.stop", json!({ "id": cap }))?;
    call(api, "node.stop", json!({ "node": "teleop" }))?;
    call(api, "node.stop", json!({ "node": node }))?;
    let max = guarded.iter().map(|x| x.abs()).fold(0.0, f64::max);
    r.metric("guarded_messages", guarded.len());
    r.metric("guarded_max_linear_x", max);
    r.check("enough messages", guarded.len() >= WANT, format!("{} (want {WANT})", guarded.len()));
    r.check("max |linear.x| is exactly 5.0", max == 5.0 && guarded.iter().all(|x| x.is_finite()), format!("{max}"));
    Ok(())
}
