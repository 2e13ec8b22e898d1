#![allow(dead_code)]

pub mod routing;
pub mod specs;
pub mod wire;

use std::time::{Duration, Instant};

use bytes::Bytes;
use nodewrap::bus::{Broker, Connector, Delivery, SubscriptionHandle};
use nodewrap::node::Runtime;
use nodewrap::pipeline::{build_literal, parse_literal, parse_pipeline};
use nodewrap::schema::{decode, encode, FieldPath, MessageValue, SchemaRegistry, Value};

pub fn local_runtime() -> (Broker, Runtime) {
    let broker = Broker::new();
    let rt = Runtime::new(Connector::Local(broker.clone()));
    (broker, rt)
}

pub fn define(rt: &Runtime, name: &str, body: &str) {
    rt.pipelines.define(parse_pipeline(name, body).unwrap());
}

pub fn literal(rt: &Runtime, text: &str) -> MessageValue {
    build_literal(&parse_literal(text).unwrap(), rt.ctx()).unwrap()
}

pub fn twist(rt: &Runtime, x: f64, z: f64) -> MessageValue {
    literal(rt, &format!("Twist{{linear.x := {x:?}, angular.z := {z:?}}}"))
}

pub fn field(schemas: &SchemaRegistry, payload: &[u8], schema: &str, path: &str) -> f64 {
    let layout = schemas.layout(schema).unwrap();
    let m = decode(&layout, payload).unwrap();
    let r = layout.resolve(&FieldPath::parse(path).unwrap()).unwrap();
    m.get(&r).unwrap().as_f64().unwrap()
}

/// Encoded `Numbered{index, data}` with `extra` filler bytes.
pub fn numbered(schemas: &SchemaRegistry, index: i64, extra: usize) -> Bytes {
    let layout = schemas.layout("Numbered").unwrap();
    let mut m = layout.zero_message();
    m.fields[0] = Value::I64(index);
    m.fields[1] = Value::List((0..extra).map(|i| Value::U8((index as usize + i) as u8)).collect());
    Bytes::from(encode(&layout, &m).unwrap())
}

pub fn index_of(schemas: &SchemaRegistry, payload: &[u8]) -> i64 {
    field(schemas, payload, "Numbered", "index") as i64
}

/// Pull until `n` messages arrived or the queue has been quiet for `idle`.
pub fn collect(sub: &SubscriptionHandle, n: usize, idle: Duration) -> Vec<Delivery> {
    let mut out = Vec::new();
    while out.len() < n {
        match sub.recv_timeout(idle) {
            Some(d) => out.push(d),
            None => break,
        }
    }
    out
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    f()
}

/// First gap, duplicate or reordering in a stream that should read
/// `first, first+1, ...`.
pub fn stream_fault(indices: &[i64], first: i64) -> Option<String> {
    for (k, &i) in indices.iter().enumerate() {
        let want = first + k as i64;
        if i != want {
            return Some(format!("position {k}: expected {want}, got {i}"));
        }
    }
    None
}
