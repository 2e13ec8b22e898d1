use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::broker::{Broker, Caller, DeliverySink, SessionId};
use super::envelope::Envelope;
use super::queue::DEFAULT_QUEUE_CAPACITY;
use super::wire::{Frame, FrameReader, ReadEvent, ASYNC_ERROR_FLAG};
use super::{BusError, TopicName};

pub const KEEPALIVE_INTERVAL: Duration = Duration::from_secs(5);
pub const KEEPALIVE_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Default)]
struct OutState {
    control: VecDeque<Frame>,
    deliveries: BTreeMap<u32, VecDeque<(TopicName, Arc<Envelope>)>>,
    closed: bool,
}

/// Outgoing side of one TCP session: replies in order, plus one bounded
/// drop-oldest queue per subscription.
struct Outbox {
    state: Mutex<OutState>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
}

impl Outbox {
    fn new(capacity: usize) -> Self {
        Outbox { state: Mutex::default(), ready: Condvar::new(), capacity, dropped: AtomicU64::new(0) }
    }

    fn send(&self, frame: Frame) {
        let mut st = self.state.lock();
        if !st.closed {
            st.control.push_back(frame);
            drop(st);
            self.ready.notify_one();
        }
    }

    fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }

    /// Next batch to write, or `None` once closed and drained.
    fn take(&self) -> Option<Vec<Frame>> {
        let mut st = self.state.lock();
        loop {
            let pending = !st.control.is_empty() || st.deliveries.values().any(|q| !q.is_empty());
            if pending {
                let mut out: Vec<Frame> = st.control.drain(..).collect();
                for q in st.deliveries.values_mut() {
                    out.extend(q.drain(..).map(|(topic, e)| deliver_frame(&topic, &e)));
                }
                return Some(out);
            }
            if st.closed {
                return None;
            }
            self.ready.wait(&mut st);
        }
    }
}

fn deliver_frame(topic: &TopicName, e: &Envelope) -> Frame {
    Frame::Deliver {
        topic: topic.to_string(),
        schema: e.schema.clone().unwrap_or_default(),
        seq: e.seq,
        timestamp: e.timestamp,
        payload: e.payload.clone(),
        publisher: e.publisher.clone(),
        origin: e.origin.clone(),
    }
}

impl DeliverySink for Outbox {
    fn deliver(&self, handle: u32, topic: &TopicName, envelope: &Arc<Envelope>) {
        let mut st = self.state.lock();
        if st.closed {
            return;
        }
        let q = st.deliveries.entry(handle).or_default();
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back((topic.clone(), envelope.clone()));
        drop(st);
        self.ready.notify_one();
    }

    fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Copy)]
struct Keepalive {
    interval: Duration,
    timeout: Duration,
}

/// TCP front end for a [`Broker`].
pub struct BrokerServer {
    broker: Broker,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(addr: &str, broker: Broker) -> io::Result<Self> {
        Self::bind_with_keepalive(addr, broker, KEEPALIVE_INTERVAL, KEEPALIVE_TIMEOUT)
    }

    pub fn bind_with_keepalive(
        addr: &str,
        broker: Broker,
        interval: Duration,
        timeout: Duration,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let keepalive = Keepalive { interval, timeout };
        let accept = {
            let (broker, stop, conns) = (broker.clone(), stop.clone(), conns.clone());
            thread::Builder::new().name("nw-accept".into()).spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let _ = stream.set_nodelay(true);
                    if let Ok(clone) = stream.try_clone() {
                        let mut list = conns.lock();
                        list.retain(|s| s.peer_addr().is_ok());
                        list.push(clone);
                    }
                    let broker = broker.clone();
                    let _ = thread::Builder::new()
                        .name("nw-conn".into())
                        .spawn(move || serve_connection(broker, stream, keepalive));
                }
            })?
        };
        log::info!("broker listening on {addr}");
        Ok(BrokerServer { broker, addr, stop, conns, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port` suitable for `NW_BROKER_URI`.
    pub fn uri(&self) -> String {
        self.addr.to_string()
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    /// Block until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for s in self.conns.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(broker: Broker, stream: TcpStream, keepalive: Keepalive) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let outbox = Arc::new(Outbox::new(DEFAULT_QUEUE_CAPACITY));
    let writer = {
        let outbox = outbox.clone();
        let Ok(out) = stream.try_clone() else { return };
        thread::Builder::new().name("nw-conn-write".into()).spawn(move || {
            let mut w = BufWriter::with_capacity(64 * 1024, out);
            while let Some(batch) = outbox.take() {
                let ok = batch.iter().all(|f| f.write_to(&mut w).is_ok()) && w.flush().is_ok();
                if !ok {
                    outbox.close();
                    break;
                }
            }
            let _ = w.get_ref().shutdown(Shutdown::Both);
        })
    };
    let Ok(writer) = writer else { return };
    let _ = stream.set_write_timeout(Some(keepalive.timeout));
    let _ = stream.set_read_timeout(Some(keepalive.interval.min(Duration::from_secs(1))));
    let mut reader = FrameReader::new(&stream);
    let mut session: Option<SessionId> = None;
    let mut last_heard = Instant::now();
    let mut last_ping = Instant::now();
    loop {
        let event = match reader.read_frame() {
            Ok(ev) => ev,
            Err(e) => {
                log::debug!("connection {peer}: {e}");
                break;
            }
        };
        let now = Instant::now();
        match event {
            ReadEvent::Closed => break,
            ReadEvent::Idle => {}
            ReadEvent::Frame(Err(e)) => {
                last_heard = now;
                outbox.send(error_frame(&BusError::Protocol(e.to_string()), false));
            }
            ReadEvent::Frame(Ok(frame)) => {
                last_heard = now;
                if !handle_frame(&broker, &outbox, &mut session, frame) {
                    break;
                }
            }
        }
        if now.duration_since(last_heard) >= keepalive.timeout {
            log::info!("connection {peer}: no traffic for {:?}, dropping session", keepalive.timeout);
            break;
        }
        if now.duration_since(last_ping) >= keepalive.interval {
            last_ping = now;
            outbox.send(Frame::Ping);
        }
    }
    if let Some(id) = session {
        broker.close_session(id);
    }
    // Let queued replies (such as a HELLO rejection) go out before closing.
    outbox.close();
    let _ = stream.shutdown(Shutdown::Read);
    let _ = writer.join();
}

fn error_frame(e: &BusError, asynchronous: bool) -> Frame {
    let flag = if asynchronous { ASYNC_ERROR_FLAG } else { 0 };
    Frame::Error { code: e.code() | flag, message: e.detail() }
}

fn schema_arg(s: String) -> Option<String> {
    (!s.is_empty()).then_some(s)
}

/// Returns false when the connection should close.
fn handle_frame(broker: &Broker, outbox: &Arc<Outbox>, session: &mut Option<SessionId>, frame: Frame) -> bool {
    let reply = |r: Result<u32, BusError>| match r {
        Ok(handle) => outbox.send(Frame::Ack { handle, value: 0 }),
        Err(e) => outbox.send(error_frame(&e, false)),
    };
    let sid = match (*session, &frame) {
        (None, Frame::Hello { node, pid }) => {
            return match broker.open_session(node, *pid, outbox.clone()) {
                Ok(id) => {
                    *session = Some(id);
                    outbox.send(Frame::Ack { handle: 0, value: broker.clock().epoch_ns() });
                    true
                }
                Err(e) => {
                    outbox.send(error_frame(&e, false));
                    false
                }
            };
        }
        (Some(_), Frame::Hello { .. }) => {
            outbox.send(error_frame(&BusError::Protocol("duplicate HELLO".into()), false));
            return true;
        }
        (_, Frame::Ping) => {
            outbox.send(Frame::Pong);
            return true;
        }
        (_, Frame::Pong) => return true,
        (None, _) => {
            outbox.send(error_frame(&BusError::NotAuthenticated("HELLO required first".into()), false));
            return false;
        }
        (Some(id), _) => id,
    };
    match frame {
        Frame::Advertise { topic, schema } => {
            reply(TopicName::parse(&topic).and_then(|t| broker.advertise(sid, &t, schema_arg(schema).as_deref())))
        }
        Frame::Subscribe { topic, schema } => {
            reply(TopicName::parse(&topic).and_then(|t| broker.subscribe(sid, &t, schema_arg(schema).as_deref())))
        }
        Frame::Unsubscribe { handle } => reply(broker.release(sid, handle).map(|_| handle)),
        Frame::Publish { handle, payload, origin } => {
            if let Err(e) = broker.publish(sid, handle, payload, origin) {
                outbox.send(error_frame(&e, true));
            }
        }
        Frame::AliasSet { node, external, internal } => reply(
            TopicName::parse(&external)
                .and_then(|e| Ok((e, TopicName::parse(&internal)?)))
                .and_then(|(e, i)| broker.set_alias(Caller::Session(sid), &node, &e, &i))
                .map(|_| 0),
        ),
        Frame::AliasClear { node, external } => reply(
            TopicName::parse(&external).and_then(|e| broker.clear_alias(Caller::Session(sid), &node, &e)).map(|_| 0),
        ),
        Frame::SnapshotReq => {
            let json = serde_json::to_string(&broker.snapshot()).unwrap_or_default();
            outbox.send(Frame::SnapshotResp { json });
        }
        other => {
            let e = BusError::Protocol(format!("unexpected frame kind {:#04x}", other.kind()));
            outbox.send(error_frame(&e, false));
        }
    }
    true
}
