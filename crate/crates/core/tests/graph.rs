mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use common::{local_runtime, numbered, twist, wait_until};
use nodewrap::bus::{Broker, BrokerServer, Client, Connector, TopicName};
use nodewrap::launcher::{Launcher, PackageRegistry, ProcState, SpawnRequest};
use nodewrap::node::{Direction, EndpointSet, NodeSpec};
use nodewrap::schema::encode;
use nodewrap::wrap::{plan_wrap, WrapPlan};

const EXE: &str = env!("CARGO_BIN_EXE_nodewrap");

fn t(s: &str) -> TopicName {
    TopicName::parse(s).unwrap()
}

#[test]
fn fan_out_keeps_per_publisher_order() {
    let broker = Broker::new();
    let conn = Connector::Local(broker);
    // Subscribers drain while publishers run; queues are bounded.
    let ready = Arc::new(std::sync::Barrier::new(6));
    let subs: Vec<_> = (0..5)
        .map(|i| {
            let (conn, ready) = (conn.clone(), ready.clone());
            thread::spawn(move || {
                let c = Client::connect(&conn, &format!("sub{i}")).unwrap();
                let s = c.subscribe(&t("/fan"), None).unwrap();
                ready.wait();
                let mut last: BTreeMap<String, (u64, u32)> = BTreeMap::new();
                let mut n = 0;
                while let Some(d) = s.recv_timeout(Duration::from_secs(1)) {
                    let e = &d.envelope;
                    let k = u32::from_le_bytes(e.payload[..4].try_into().unwrap());
                    if let Some(&(seq, prev)) = last.get(&e.publisher) {
                        assert!(e.seq > seq && k == prev + 1, "{} out of order: {seq}/{prev} then {}/{k}", e.publisher, e.seq);
                    } else {
                        assert_eq!(k, 0);
                    }
                    last.insert(e.publisher.clone(), (e.seq, k));
                    n += 1;
                }
                assert_eq!(s.dropped(), 0);
                assert_eq!(last.len(), 3);
                assert!(last.values().all(|&(_, k)| k == 999));
                n
            })
        })
        .collect();
    ready.wait();
    let pubs: Vec<_> = (0..3)
        .map(|i| {
            let conn = conn.clone();
            thread::spawn(move || {
                let c = Client::connect(&conn, &format!("pub{i}")).unwrap();
                let p = c.advertise(&t("/fan"), None).unwrap();
                for k in 0..1000u32 {
                    c.publish(&p, k.to_le_bytes().to_vec().into(), None).unwrap();
                    if k % 100 == 99 {
                        thread::yield_now();
                    }
                }
                c
            })
        })
        .collect();
    let _clients: Vec<Client> = pubs.into_iter().map(|h| h.join().unwrap()).collect();
    let mut total = 0;
    for s in subs {
        let n = s.join().unwrap();
        assert_eq!(n, 3000);
        total += n;
    }
    assert_eq!(total, 15_000);
}

#[test]
fn raw_and_typed_subscribers_see_the_same_bytes() {
    let server = BrokerServer::bind("127.0.0.1:0", Broker::new()).unwrap();
    let (_, rt) = local_runtime();
    let conn = Connector::Tcp(server.uri());
    let c = Client::connect(&conn, "typed_observer").unwrap();
    let typed = c.subscribe(&t("/turtle1/cmd_vel"), Some("Twist")).unwrap();
    let r = Client::connect(&conn, "raw_observer").unwrap();
    let raw = r.subscribe(&t("/turtle1/cmd_vel"), None).unwrap();
    let p = Client::connect(&conn, "driver").unwrap();
    let h = p.advertise(&t("/turtle1/cmd_vel"), Some("Twist")).unwrap();
    let layout = rt.schemas.layout("Twist").unwrap();
    let mut sent = Vec::new();
    for i in 0..50 {
        let bytes = encode(&layout, &twist(&rt, i as f64 * 0.1, -(i as f64))).unwrap();
        p.publish(&h, bytes.clone().into(), None).unwrap();
        sent.push(bytes);
    }
    for want in &sent {
        let a = typed.recv_timeout(Duration::from_secs(2)).unwrap();
        let b = raw.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(&a.envelope.payload[..], &want[..]);
        assert_eq!(a.envelope.payload, b.envelope.payload);
        assert_eq!(a.envelope.seq, b.envelope.seq);
    }
}

#[test]
fn snapshots_stay_consistent_under_load() {
    let broker = Broker::new();
    let conn = Connector::Local(broker.clone());
    let stop = Arc::new(AtomicBool::new(false));
    let (_, rt) = local_runtime();
    let workers: Vec<_> = (0..4)
        .map(|i| {
            let (conn, stop, schemas) = (conn.clone(), stop.clone(), rt.schemas.clone());
            thread::spawn(move || {
                let c = Client::connect(&conn, &format!("load{i}")).unwrap();
                let p = c.advertise(&t(&format!("/load/{i}")), Some("Numbered")).unwrap();
                let _s = c.subscribe(&t(&format!("/load/{}", (i + 1) % 4)), Some("Numbered")).unwrap();
                let start = Instant::now();
                let mut k = 0u64;
                let mut churn = 0;
                while !stop.load(Ordering::SeqCst) {
                    c.publish(&p, numbered(&schemas, k as i64, 4), None).unwrap();
                    k += 1;
                    if k.is_multiple_of(200) {
                        // Endpoints come and go while snapshots are taken.
                        let extra = c.subscribe(&t(&format!("/churn/{}", churn % 3)), None).unwrap();
                        c.unsubscribe(&extra).unwrap();
                        churn += 1;
                    }
                    // 2500 msg/s per worker.
                    let next = start + Duration::from_micros(400 * k);
                    thread::sleep(next.saturating_duration_since(Instant::now()));
                }
                k
            })
        })
        .collect();
    let observer = Client::connect(&conn, "observer").unwrap();
    let start = Instant::now();
    let mut taken = 0;
    while start.elapsed() < Duration::from_secs(1) {
        let s = observer.snapshot().unwrap();
        s.validate().unwrap();
        taken += 1;
    }
    stop.store(true, Ordering::SeqCst);
    let sent: u64 = workers.into_iter().map(|w| w.join().unwrap()).sum();
    assert!(taken > 10);
    assert!(sent >= 5000, "only {sent} messages in the window");
}

#[test]
fn timer_runs_at_a_hundred_hertz_for_ten_seconds() {
    let (broker, rt) = local_runtime();
    common::define(&rt, "tick", "emit Twist{linear.x := 1} to /tick");
    let mut nd = NodeSpec::new("ticker").unwrap();
    nd.new_endpoints().publish("/tick", "Twist").unwrap();
    let node = rt.create(nd).unwrap();
    let sink = Client::connect(&Connector::Local(broker), "sink").unwrap();
    let sub = sink.subscribe(&t("/tick"), Some("Twist")).unwrap();
    let clock = sink.clock();
    let start = Instant::now();
    let id = node.add_timer(0.01, "tick").unwrap();
    let mut stamps = Vec::new();
    while start.elapsed() < Duration::from_secs(10) {
        if sub.recv_timeout(Duration::from_millis(20)).is_some() {
            stamps.push(clock.now_ns());
        }
    }
    node.remove_timer(id).unwrap();
    let n = stamps.len();
    assert!((998..=1002).contains(&n), "{n} emissions");
    let mut gaps: Vec<u64> = stamps.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_unstable();
    let p99 = gaps[gaps.len() * 99 / 100];
    assert!(p99 <= 20_000_000, "p99 spacing {p99} ns");
}

/// A node in the planned wiring graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum V {
    Base,
    Relay(usize),
    Topic(String),
}

/// Edges of the wiring: base endpoints after aliasing plus one vertex per
/// relay. Built from the plan only, without the broker.
fn wiring(plan: &WrapPlan, subs: &[&str], pubs: &[&str]) -> Vec<(V, V)> {
    let eff = |s: &str| plan.aliases.get(&t(s)).cloned().unwrap_or_else(|| t(s)).as_str().to_string();
    let mut edges = Vec::new();
    for s in subs {
        edges.push((V::Topic(eff(s)), V::Base));
    }
    for p in pubs {
        edges.push((V::Base, V::Topic(eff(p))));
    }
    for (i, r) in plan.relays.iter().enumerate() {
        edges.push((V::Topic(r.source.as_str().into()), V::Relay(i)));
        edges.push((V::Relay(i), V::Topic(r.target.as_str().into())));
    }
    edges
}

/// Vertices reachable from `from` following edges forward (or backward),
/// optionally refusing to pass through relays.
fn reach(edges: &[(V, V)], from: &V, forward: bool, via_relays: bool) -> BTreeSet<V> {
    let mut seen = BTreeSet::new();
    let mut q = VecDeque::from([from.clone()]);
    while let Some(v) = q.pop_front() {
        for (a, b) in edges {
            let (src, dst) = if forward { (a, b) } else { (b, a) };
            if *src == v && !seen.contains(dst) && (via_relays || !matches!(dst, V::Relay(_))) {
                seen.insert(dst.clone());
                q.push_back(dst.clone());
            }
        }
    }
    seen
}

fn external(vs: &BTreeSet<V>) -> BTreeSet<String> {
    vs.iter()
        .filter_map(|v| match v {
            V::Topic(s) if !s.starts_with("/__wrap/") => Some(s.clone()),
            _ => None,
        })
        .collect()
}

fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

const BASE_SUBS: &[&str] = &["/BT1", "/BT2", "/BT3", "/BT8"];
const BASE_PUBS: &[&str] = &["/BT4", "/BT5", "/BT6", "/BT7"];

fn overview_spec() -> NodeSpec {
    let mut nd = NodeSpec::new("wrappingnode").unwrap();
    nd.set_base("demo", "basenode").unwrap();
    for s in ["/BT1", "/BT2"] {
        nd.add_endpoint(EndpointSet::Reuse, Direction::Subscribe, s, None, None).unwrap();
    }
    for p in ["/BT5", "/BT6"] {
        nd.add_endpoint(EndpointSet::Reuse, Direction::Publish, p, None, None).unwrap();
    }
    nd.add_replace("/BT4", "/WT8", "pass", None).unwrap();
    for (i, s) in ["/WT4", "/WT5"].iter().enumerate() {
        nd.add_endpoint(EndpointSet::New, Direction::Subscribe, s, None, None).unwrap();
        nd.add_endpoint(EndpointSet::New, Direction::Publish, ["/WT6", "/WT7"][i], None, None).unwrap();
    }
    nd
}

#[test]
fn overview_topology_plan_matches_the_figure() {
    let plan = plan_wrap(&overview_spec()).unwrap();
    let aliased: BTreeSet<String> = plan.aliases.keys().map(|k| k.as_str().to_string()).collect();
    assert_eq!(aliased, set(&["/BT1", "/BT2", "/BT4", "/BT5", "/BT6"]));
    // New endpoints never show up in the wiring.
    assert!(plan.relays.iter().all(|r| !r.source.as_str().starts_with("/WT") && !r.target.as_str().contains("/WT4")));

    let edges = wiring(&plan, BASE_SUBS, BASE_PUBS);
    let outputs = external(&reach(&edges, &V::Base, true, true));
    let inputs = external(&reach(&edges, &V::Base, false, true));
    assert_eq!(outputs, set(&["/BT5", "/BT6", "/BT7", "/WT8"]));
    assert_eq!(inputs, set(&["/BT1", "/BT2", "/BT3", "/BT8"]));
    // Untouched topics connect directly; wrapped ones only through relays.
    assert_eq!(external(&reach(&edges, &V::Base, true, false)), set(&["/BT7"]));
    assert_eq!(external(&reach(&edges, &V::Base, false, false)), set(&["/BT3", "/BT8"]));
}

#[test]
fn overview_topology_routes_like_the_plan() {
    let (broker, rt) = local_runtime();
    common::define(&rt, "pass", "relay to /WT8");
    let conn = Connector::Local(broker);
    let base = Client::connect(&conn, "basenode").unwrap();
    let base_in: Vec<_> = BASE_SUBS.iter().map(|s| (*s, base.subscribe(&t(s), None).unwrap())).collect();
    let base_out: Vec<_> = BASE_PUBS.iter().map(|p| (*p, base.advertise(&t(p), None).unwrap())).collect();
    let node = rt.create(overview_spec()).unwrap();
    let plan = node.plan();
    let edges = wiring(&plan, BASE_SUBS, BASE_PUBS);

    let world = Client::connect(&conn, "world").unwrap();
    let all: Vec<&str> = BASE_SUBS.iter().chain(BASE_PUBS).copied().chain(["/WT8"]).collect();
    let watch: Vec<_> = all.iter().map(|s| (*s, world.subscribe(&t(s), None).unwrap())).collect();
    thread::sleep(Duration::from_millis(50));

    let mut outputs = BTreeSet::new();
    for (p, h) in &base_out {
        base.publish(h, p.as_bytes().to_vec().into(), None).unwrap();
    }
    for (name, s) in &watch {
        while let Some(d) = s.recv_timeout(Duration::from_millis(100)) {
            if d.envelope.payload.starts_with(b"/BT") {
                outputs.insert(name.to_string());
            }
        }
    }
    assert_eq!(outputs, external(&reach(&edges, &V::Base, true, true)));

    let mut inputs = BTreeSet::new();
    let pubs: Vec<_> = BASE_SUBS.iter().map(|s| (*s, world.advertise(&t(s), None).unwrap())).collect();
    thread::sleep(Duration::from_millis(50));
    for (s, h) in &pubs {
        world.publish(h, s.as_bytes().to_vec().into(), None).unwrap();
    }
    for (_, s) in &base_in {
        while let Some(d) = s.recv_timeout(Duration::from_millis(100)) {
            inputs.insert(String::from_utf8(d.envelope.payload.to_vec()).unwrap());
        }
    }
    assert_eq!(inputs, external(&reach(&edges, &V::Base, false, true)));
}

fn demo_launcher(dir: &Path) -> Launcher {
    nodewrap::demo::install(dir, Path::new(EXE)).unwrap();
    Launcher::new(PackageRegistry::scan(vec![dir.to_path_buf()]))
}

#[test]
fn launched_simulator_joins_and_leaves_the_graph() {
    let server = BrokerServer::bind("127.0.0.1:0", Broker::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let launcher = demo_launcher(dir.path());
    let observer = Client::connect(&Connector::Tcp(server.uri()), "observer").unwrap();
    let req = SpawnRequest {
        path: launcher.resolve("demo", "turtle_sim").unwrap(),
        name: "turtlesim".into(),
        package: "demo".into(),
        node: "turtle_sim".into(),
        aliases: vec![],
        broker_uri: server.uri(),
        args: vec![],
        env: vec![],
    };
    let t0 = Instant::now();
    let h = launcher.spawn(&req, &observer).unwrap();
    assert!(wait_until(Duration::from_secs(10), || {
        observer.snapshot().unwrap().node("turtlesim").is_some_and(|n| !n.publications.is_empty())
    }));
    assert!(t0.elapsed() < Duration::from_secs(10));
    let snap = observer.snapshot().unwrap();
    assert_eq!(snap.node("turtlesim").unwrap().pid, Some(h.pid()));
    assert!(snap.topic("/turtle1/pose").is_some());

    let end = h.stop(Duration::from_secs(2));
    assert!(!end.is_running());
    assert!(wait_until(Duration::from_secs(5), || observer.snapshot().unwrap().node("turtlesim").is_none()));
    let snap = observer.snapshot().unwrap();
    assert!(snap.topic("/turtle1/pose").is_none(), "endpoints outlive the process: {snap:?}");
    assert_eq!(h.stop(Duration::from_secs(1)), end);
}

#[test]
fn stubborn_child_is_killed_at_the_grace_deadline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stubborn");
    std::fs::write(&path, "#!/bin/sh\ntrap '' TERM\nwhile true; do sleep 0.05; done\n").unwrap();
    let mut perms = std::fs::metadata(&path).unwrap().permissions();
    std::os::unix::fs::PermissionsExt::set_mode(&mut perms, 0o755);
    std::fs::set_permissions(&path, perms).unwrap();
    let launcher = Launcher::new(PackageRegistry::default());
    let req = SpawnRequest {
        path,
        name: "stubborn".into(),
        package: "local".into(),
        node: "stubborn".into(),
        aliases: vec![],
        broker_uri: "127.0.0.1:1".into(),
        args: vec![],
        env: vec![],
    };
    let h = launcher.spawn_unchecked(&req).unwrap();
    thread::sleep(Duration::from_millis(300));
    let grace = Duration::from_secs(1);
    let t0 = Instant::now();
    assert_eq!(h.stop(grace), ProcState::Killed { signal: 9 });
    let took = t0.elapsed();
    assert!(took >= grace && took <= grace + Duration::from_millis(500), "{took:?}");
}
