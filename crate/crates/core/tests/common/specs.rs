//! Random node specs built through the public builder.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

use nodewrap::node::{Direction, EndpointSet, NodeSpec};
use nodewrap::pipeline::{parse_pipeline, PipelineLibrary};
use nodewrap::wrap::plan_wrap;

/// Pipelines random subscriptions may reference. Neither has outputs, so
/// any endpoint may use them.
pub const PIPELINES: &[(&str, &str)] = &[("quiet", "drop"), ("note", "log \"seen\"")];

/// Timers need something to emit; specs with timers also publish `/tick`.
pub const TICK: (&str, &str) = ("tick", "emit Twist{linear.x := 1} to /tick");

const TOPICS: &[&str] = &["/a", "/b", "/c/d", "/cmd_vel", "/pose", "/odom", "/x/y/z"];
const SCHEMAS: &[Option<&str>] = &[None, Some("Twist"), Some("Pose"), Some("Numbered")];

pub fn library() -> PipelineLibrary {
    let lib = PipelineLibrary::new();
    for (name, body) in PIPELINES.iter().chain([&TICK]) {
        lib.define(parse_pipeline(name, body).unwrap());
    }
    lib
}

fn pick<'a, T>(rng: &mut StdRng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).unwrap()
}

fn pipeline(rng: &mut StdRng) -> Option<&'static str> {
    if rng.gen_bool(0.5) {
        Some(pick(rng, PIPELINES).0)
    } else {
        None
    }
}

fn usable(s: &NodeSpec) -> bool {
    s.validate().is_ok() && plan_wrap(s).is_ok()
}

/// A valid, plannable spec named `name`. Builder calls that would break
/// it are skipped, so the result is whatever a user could have built.
pub fn random_spec(rng: &mut StdRng, name: &str, with_base: bool) -> NodeSpec {
    let mut s = NodeSpec::new(name).unwrap();
    // One schema per topic; the broker refuses a topic carrying two.
    let types: BTreeMap<&str, Option<&str>> = TOPICS.iter().map(|t| (*t, *pick(rng, SCHEMAS))).collect();
    if with_base {
        s.set_base("pkg", "base_node").unwrap();
    }
    for _ in 0..rng.gen_range(0..8) {
        let set = if with_base && rng.gen_bool(0.5) { EndpointSet::Reuse } else { EndpointSet::New };
        let dir = if rng.gen_bool(0.5) { Direction::Publish } else { Direction::Subscribe };
        let topic = pick(rng, TOPICS);
        let schema = types[topic];
        let p = if dir == Direction::Subscribe { pipeline(rng) } else { None };
        let mut next = s.clone();
        if next.add_endpoint(set, dir, topic, schema, p).is_ok() && usable(&next) {
            s = next;
        }
    }
    if with_base {
        for i in 0..rng.gen_range(0..3) {
            let from = pick(rng, TOPICS);
            let to = format!("/replaced_{i}");
            let schema = types[from];
            let p = pick(rng, PIPELINES).0;
            let mut next = s.clone();
            if next.add_replace(from, &to, p, schema).is_ok() && usable(&next) {
                s = next;
            }
        }
    }
    for _ in 0..rng.gen_range(0..3) {
        let period = rng.gen_range(1..40) as f64 * 0.25;
        let mut next = s.clone();
        let ok = next.add_endpoint(EndpointSet::New, Direction::Publish, "/tick", Some("Twist"), None).is_ok()
            && next.add_timer(period, TICK.0).is_ok()
            && usable(&next);
        if ok {
            s = next;
        }
    }
    for i in 0..rng.gen_range(0..3) {
        let _ = s.set_param(&format!("k{i}"), rng.gen_range(-100.0..100.0));
    }
    assert!(usable(&s));
    s
}
