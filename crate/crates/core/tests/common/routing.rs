//! Randomized broker workload checked against a brute-force model of the
//! routing table: per-node endpoint lists plus alias tables, scanned in
//! full for every publish.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use nodewrap::bus::{Broker, Caller, DeliverySink, Envelope, SessionId, TopicName};

#[derive(Default)]
struct Sink {
    got: Mutex<Vec<(String, String)>>,
    name: String,
}

impl DeliverySink for Sink {
    fn deliver(&self, _handle: u32, topic: &TopicName, _e: &Arc<Envelope>) {
        self.got.lock().push((self.name.clone(), topic.as_str().to_string()));
    }
}

#[derive(Default)]
struct NodeModel {
    /// requested topic -> (handle, refs)
    pubs: BTreeMap<String, (u32, u32)>,
    subs: BTreeMap<String, (u32, u32)>,
    aliases: BTreeMap<String, String>,
}

impl NodeModel {
    fn effective(&self, t: &str) -> String {
        self.aliases.get(t).cloned().unwrap_or_else(|| t.to_string())
    }
}

pub struct RoutingReport {
    pub ops: usize,
    pub publishes: usize,
    pub mismatches: usize,
    pub deliveries: usize,
    pub first_mismatch: Option<String>,
}

const PLAIN: &[&str] = &["/a", "/b", "/c", "/d", "/e/f"];

fn t(s: &str) -> TopicName {
    TopicName::parse(s).unwrap()
}

/// Run `ops` random operations with a fixed seed.
pub fn run(seed: u64, ops: usize) -> RoutingReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let broker = Broker::new();
    // `w` owns /__wrap/w/...; it may alias anyone into its namespace.
    let names = ["w", "n1", "n2", "n3", "n4", "n5"];
    let mut sessions: BTreeMap<&str, (SessionId, Arc<Sink>)> = BTreeMap::new();
    let mut model: BTreeMap<&str, NodeModel> = BTreeMap::new();
    for n in names {
        let sink = Arc::new(Sink { name: n.to_string(), ..Default::default() });
        let id = broker.open_session(n, None, sink.clone()).unwrap();
        sessions.insert(n, (id, sink));
        model.insert(n, NodeModel::default());
    }
    let wrapped: Vec<String> = PLAIN.iter().map(|p| format!("/__wrap/w{p}")).collect();
    let mut report = RoutingReport { ops, publishes: 0, mismatches: 0, deliveries: 0, first_mismatch: None };

    for step in 0..ops {
        let node = *names.choose(&mut rng).unwrap();
        let sid = sessions[node].0;
        let topic = if node == "w" && rng.gen_bool(0.4) {
            wrapped.choose(&mut rng).unwrap().clone()
        } else {
            PLAIN.choose(&mut rng).unwrap().to_string()
        };
        match rng.gen_range(0..100) {
            0..=14 => {
                let h = broker.advertise(sid, &t(&topic), None).unwrap();
                let e = model.get_mut(node).unwrap().pubs.entry(topic).or_insert((h, 0));
                assert_eq!(e.0, h, "advertising again returns the same handle");
                e.1 += 1;
            }
            15..=29 => {
                let h = broker.subscribe(sid, &t(&topic), None).unwrap();
                let e = model.get_mut(node).unwrap().subs.entry(topic).or_insert((h, 0));
                assert_eq!(e.0, h);
                e.1 += 1;
            }
            30..=37 => {
                let m = model.get_mut(node).unwrap();
                let table = if rng.gen_bool(0.5) { &mut m.pubs } else { &mut m.subs };
                let keys: Vec<String> = table.keys().cloned().collect();
                if let Some(k) = keys.choose(&mut rng) {
                    let (h, refs) = table[k];
                    broker.release(sid, h).unwrap();
                    if refs == 1 {
                        table.remove(k);
                    } else {
                        table.get_mut(k).unwrap().1 -= 1;
                    }
                }
            }
            38..=45 => {
                let target = *names[1..].choose(&mut rng).unwrap();
                let ext = PLAIN.choose(&mut rng).unwrap().to_string();
                let int = wrapped.choose(&mut rng).unwrap().clone();
                let caller = if rng.gen_bool(0.5) { Caller::Admin } else { Caller::Session(sessions["w"].0) };
                let m = &model[target];
                let collides = m.aliases.iter().any(|(e, i)| *i == int && *e != ext);
                let r = broker.set_alias(caller, target, &t(&ext), &t(&int));
                assert_eq!(r.is_err(), collides, "alias {target} {ext}->{int}: {r:?}");
                if !collides {
                    model.get_mut(target).unwrap().aliases.insert(ext, int);
                }
            }
            46..=50 => {
                let target = *names[1..].choose(&mut rng).unwrap();
                let ext = PLAIN.choose(&mut rng).unwrap().to_string();
                broker.clear_alias(Caller::Admin, target, &t(&ext)).unwrap();
                model.get_mut(target).unwrap().aliases.remove(&ext);
            }
            _ => {
                let m = &model[node];
                let keys: Vec<String> = m.pubs.keys().cloned().collect();
                let Some(k) = keys.choose(&mut rng) else { continue };
                let h = m.pubs[k].0;
                let eff = m.effective(k);
                // Brute force: every subscription of every node whose
                // effective topic equals the publisher's.
                let mut expected: BTreeSet<(String, String)> = BTreeSet::new();
                for (n, nm) in &model {
                    for req in nm.subs.keys() {
                        if nm.effective(req) == eff {
                            expected.insert((n.to_string(), req.clone()));
                        }
                    }
                }
                for (_, s) in sessions.values() {
                    s.got.lock().clear();
                }
                broker.publish(sid, h, Bytes::from_static(b"x"), None).unwrap();
                let mut got: Vec<(String, String)> = Vec::new();
                for (_, s) in sessions.values() {
                    got.extend(s.got.lock().drain(..));
                }
                report.publishes += 1;
                report.deliveries += got.len();
                let got_set: BTreeSet<_> = got.iter().cloned().collect();
                if got_set != expected || got_set.len() != got.len() {
                    report.mismatches += 1;
                    if report.first_mismatch.is_none() {
                        report.first_mismatch = Some(format!("step {step}: {node} on {k}: got {got:?}, expected {expected:?}"));
                    }
                }
            }
        }
    }
    report
}
