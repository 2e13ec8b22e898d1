use std::collections::{HashMap, VecDeque};
use std::io::{BufWriter, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};

use super::broker::{Broker, Caller, DeliverySink, SessionClock, SessionId};
use super::envelope::{Envelope, Origin};
use super::queue::{DropQueue, Pop, DEFAULT_QUEUE_CAPACITY};
use super::snapshot::GraphSnapshot;
use super::wire::{Frame, FrameReader, ReadEvent, ASYNC_ERROR_FLAG};
use super::{BusError, TopicName, BROKER_URI_ENV};

pub const DEFAULT_BROKER_PORT: u16 = 11411;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

/// How to reach a broker.
#[derive(Clone)]
pub enum Connector {
    /// Same process; publishes skip framing entirely.
    Local(Broker),
    /// `host:port` over TCP.
    Tcp(String),
}

impl Connector {
    /// `NW_BROKER_URI` if set, otherwise the default local port.
    pub fn from_env() -> Connector {
        Connector::Tcp(std::env::var(BROKER_URI_ENV).unwrap_or_else(|_| format!("127.0.0.1:{DEFAULT_BROKER_PORT}")))
    }

    /// Address to hand to child processes, if this connector has one.
    pub fn uri(&self) -> Option<&str> {
        match self {
            Connector::Local(_) => None,
            Connector::Tcp(a) => Some(a),
        }
    }
}

impl std::fmt::Debug for Connector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Connector::Local(_) => f.write_str("Local"),
            Connector::Tcp(a) => write!(f, "Tcp({a})"),
        }
    }
}

/// A message handed to a subscriber.
#[derive(Debug, Clone)]
pub struct Delivery {
    /// The topic as subscribed, before alias resolution.
    pub topic: TopicName,
    pub envelope: Arc<Envelope>,
}

pub type Handler = Arc<dyn Fn(&Delivery) + Send + Sync>;

struct SubState {
    topic: TopicName,
    handle: Mutex<u32>,
    refs: Mutex<u32>,
    queue: DropQueue<Delivery>,
    handler: RwLock<Option<Handler>>,
    worker: AtomicBool,
}

type SubTable = Arc<RwLock<HashMap<TopicName, Arc<SubState>>>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicationHandle {
    pub handle: u32,
    pub topic: TopicName,
    pub schema: Option<String>,
}

/// A live subscription. Messages queue here until pulled with
/// [`SubscriptionHandle::recv_timeout`] or consumed by a handler.
#[derive(Clone)]
pub struct SubscriptionHandle {
    state: Arc<SubState>,
}

impl SubscriptionHandle {
    pub fn topic(&self) -> &TopicName {
        &self.state.topic
    }

    pub fn handle(&self) -> u32 {
        *self.state.handle.lock()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        match self.state.queue.pop_timeout(timeout) {
            Pop::Item(d) => Some(d),
            _ => None,
        }
    }

    /// Replace the handler. The swap happens between two invocations, so
    /// every message is handled by exactly one version.
    pub fn set_handler(&self, handler: Handler) {
        *self.state.handler.write() = Some(handler);
        if !self.state.worker.swap(true, Ordering::SeqCst) {
            let state = self.state.clone();
            let name = format!("nw-sub{}", state.topic.as_str().replace('/', "."));
            let spawned = thread::Builder::new().name(name).spawn(move || run_worker(state));
            if let Err(e) = spawned {
                log::error!("cannot start subscription worker: {e}");
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.state.queue.dropped()
    }

    pub fn pending(&self) -> usize {
        self.state.queue.len()
    }
}

fn run_worker(state: Arc<SubState>) {
    loop {
        match state.queue.pop_timeout(Duration::from_millis(500)) {
            Pop::Item(d) => {
                let handler = state.handler.read().clone();
                if let Some(h) = handler {
                    if catch_unwind(AssertUnwindSafe(|| h(&d))).is_err() {
                        log::error!("handler for {} panicked", state.topic);
                    }
                }
            }
            Pop::Timeout => {}
            Pop::Closed => break,
        }
    }
}

struct LocalSink {
    subs: SubTable,
}

impl DeliverySink for LocalSink {
    fn deliver(&self, _handle: u32, topic: &TopicName, envelope: &Arc<Envelope>) {
        if let Some(s) = self.subs.read().get(topic) {
            s.queue.push(Delivery { topic: topic.clone(), envelope: envelope.clone() });
        }
    }

    fn dropped(&self) -> u64 {
        self.subs.read().values().map(|s| s.queue.dropped()).sum()
    }
}

type Reply = SyncSender<Result<Frame, BusError>>;

struct TcpWriter {
    out: BufWriter<TcpStream>,
    seqs: HashMap<TopicName, u64>,
}

struct TcpShared {
    writer: Mutex<TcpWriter>,
    pending: Mutex<VecDeque<Reply>>,
    closed: AtomicBool,
    last_async_error: Mutex<Option<BusError>>,
    stream: TcpStream,
}

impl TcpShared {
    fn fail_pending(&self) {
        self.closed.store(true, Ordering::SeqCst);
        for tx in self.pending.lock().drain(..) {
            let _ = tx.try_send(Err(BusError::Disconnected));
        }
    }

    fn request(&self, frame: Frame) -> Result<Frame, BusError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(BusError::Disconnected);
        }
        let (tx, rx) = sync_channel(1);
        {
            let mut w = self.writer.lock();
            self.pending.lock().push_back(tx);
            if frame.write_to(&mut w.out).and_then(|_| w.out.flush()).is_err() {
                drop(w);
                self.fail_pending();
                return Err(BusError::Disconnected);
            }
        }
        match rx.recv_timeout(REQUEST_TIMEOUT) {
            Ok(Ok(Frame::Error { code, message })) => Err(BusError::from_code(code, message)),
            Ok(r) => r,
            Err(_) => Err(BusError::Disconnected),
        }
    }
}

enum Transport {
    Local { broker: Broker, session: SessionId },
    Tcp(Arc<TcpShared>),
}

struct ClientInner {
    name: String,
    clock: SessionClock,
    transport: Transport,
    subs: SubTable,
    closed: AtomicBool,
}

impl ClientInner {
    fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        match &self.transport {
            Transport::Local { broker, session } => broker.close_session(*session),
            Transport::Tcp(shared) => {
                let _ = shared.stream.shutdown(Shutdown::Both);
                shared.fail_pending();
            }
        }
        for s in self.subs.read().values() {
            s.queue.close();
        }
    }
}

impl Drop for ClientInner {
    fn drop(&mut self) {
        self.close();
    }
}

/// One node's session with the broker. Cheap to clone; the session ends
/// when the last clone is dropped or [`Client::close`] is called.
#[derive(Clone)]
pub struct Client {
    inner: Arc<ClientInner>,
}

impl Client {
    pub fn connect(connector: &Connector, name: &str) -> Result<Client, BusError> {
        let subs: SubTable = Arc::default();
        let pid = Some(std::process::id());
        let (transport, clock) = match connector {
            Connector::Local(broker) => {
                let session = broker.open_session(name, pid, Arc::new(LocalSink { subs: subs.clone() }))?;
                (Transport::Local { broker: broker.clone(), session }, broker.clock())
            }
            Connector::Tcp(addr) => {
                let (shared, epoch) = connect_tcp(addr, name, pid, subs.clone())?;
                (Transport::Tcp(shared), SessionClock::from_epoch(epoch))
            }
        };
        Ok(Client {
            inner: Arc::new(ClientInner { name: name.to_string(), clock, transport, subs, closed: AtomicBool::new(false) }),
        })
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Nanoseconds on the broker's session clock.
    pub fn now_ns(&self) -> u64 {
        self.inner.clock.now_ns()
    }

    pub fn clock(&self) -> SessionClock {
        self.inner.clock
    }

    pub fn is_connected(&self) -> bool {
        if self.inner.closed.load(Ordering::SeqCst) {
            return false;
        }
        match &self.inner.transport {
            Transport::Local { .. } => true,
            Transport::Tcp(s) => !s.closed.load(Ordering::SeqCst),
        }
    }

    /// Most recent error the broker reported for a fire-and-forget publish.
    pub fn last_async_error(&self) -> Option<BusError> {
        match &self.inner.transport {
            Transport::Local { .. } => None,
            Transport::Tcp(s) => s.last_async_error.lock().clone(),
        }
    }

    pub fn close(&self) {
        self.inner.close();
    }

    fn ack(frame: Frame) -> Result<(u32, u64), BusError> {
        match frame {
            Frame::Ack { handle, value } => Ok((handle, value)),
            other => Err(BusError::Protocol(format!("unexpected reply kind {:#04x}", other.kind()))),
        }
    }

    fn live(&self) -> Result<(), BusError> {
        if self.inner.closed.load(Ordering::SeqCst) {
            Err(BusError::Disconnected)
        } else {
            Ok(())
        }
    }

    pub fn advertise(&self, topic: &TopicName, schema: Option<&str>) -> Result<PublicationHandle, BusError> {
        self.live()?;
        let handle = match &self.inner.transport {
            Transport::Local { broker, session } => broker.advertise(*session, topic, schema)?,
            Transport::Tcp(s) => {
                let frame = Frame::Advertise { topic: topic.to_string(), schema: schema.unwrap_or("").to_string() };
                Self::ack(s.request(frame)?)?.0
            }
        };
        Ok(PublicationHandle { handle, topic: topic.clone(), schema: schema.map(str::to_string) })
    }

    /// Drop one reference to a publication.
    pub fn unadvertise(&self, publication: &PublicationHandle) -> Result<(), BusError> {
        self.release(publication.handle)
    }

    fn release(&self, handle: u32) -> Result<(), BusError> {
        self.live()?;
        match &self.inner.transport {
            Transport::Local { broker, session } => broker.release(*session, handle),
            Transport::Tcp(s) => Self::ack(s.request(Frame::Unsubscribe { handle })?).map(|_| ()),
        }
    }

    /// Publish encoded bytes. Returns the sequence number the broker
    /// assigns. Over TCP the call does not wait for the broker; failures
    /// surface through [`Client::last_async_error`].
    pub fn publish(
        &self,
        publication: &PublicationHandle,
        payload: Bytes,
        origin: Option<Origin>,
    ) -> Result<u64, BusError> {
        self.live()?;
        match &self.inner.transport {
            Transport::Local { broker, session } => broker.publish(*session, publication.handle, payload, origin),
            Transport::Tcp(s) => {
                if s.closed.load(Ordering::SeqCst) {
                    return Err(BusError::Disconnected);
                }
                let mut w = s.writer.lock();
                let frame = Frame::Publish { handle: publication.handle, payload, origin };
                if frame.write_to(&mut w.out).and_then(|_| w.out.flush()).is_err() {
                    drop(w);
                    s.fail_pending();
                    return Err(BusError::Disconnected);
                }
                let seq = w.seqs.entry(publication.topic.clone()).or_default();
                *seq += 1;
                Ok(*seq)
            }
        }
    }

    /// Subscribe for pulling with [`SubscriptionHandle::recv_timeout`].
    /// Subscribing twice to one topic shares the queue.
    pub fn subscribe(&self, topic: &TopicName, schema: Option<&str>) -> Result<SubscriptionHandle, BusError> {
        self.live()?;
        let state = {
            let mut subs = self.inner.subs.write();
            subs.entry(topic.clone())
                .or_insert_with(|| {
                    Arc::new(SubState {
                        topic: topic.clone(),
                        handle: Mutex::new(0),
                        refs: Mutex::new(0),
                        queue: DropQueue::new(DEFAULT_QUEUE_CAPACITY),
                        handler: RwLock::new(None),
                        worker: AtomicBool::new(false),
                    })
                })
                .clone()
        };
        let result = match &self.inner.transport {
            Transport::Local { broker, session } => broker.subscribe(*session, topic, schema),
            Transport::Tcp(s) => {
                let frame = Frame::Subscribe { topic: topic.to_string(), schema: schema.unwrap_or("").to_string() };
                s.request(frame).and_then(Self::ack).map(|a| a.0)
            }
        };
        let mut refs = state.refs.lock();
        match result {
            Ok(handle) => {
                *state.handle.lock() = handle;
                *refs += 1;
                Ok(SubscriptionHandle { state: state.clone() })
            }
            Err(e) => {
                if *refs == 0 {
                    self.inner.subs.write().remove(topic);
                }
                Err(e)
            }
        }
    }

    /// Subscribe and run `handler` on a dedicated thread for each message.
    pub fn subscribe_with(
        &self,
        topic: &TopicName,
        schema: Option<&str>,
        handler: Handler,
    ) -> Result<SubscriptionHandle, BusError> {
        let sub = self.subscribe(topic, schema)?;
        sub.set_handler(handler);
        Ok(sub)
    }

    pub fn unsubscribe(&self, sub: &SubscriptionHandle) -> Result<(), BusError> {
        let last = {
            let mut refs = sub.state.refs.lock();
            *refs = refs.saturating_sub(1);
            *refs == 0
        };
        if last {
            self.inner.subs.write().remove(&sub.state.topic);
            sub.state.queue.close();
        }
        self.release(sub.handle())
    }

    pub fn set_alias(&self, node: &str, external: &TopicName, internal: &TopicName) -> Result<(), BusError> {
        self.live()?;
        match &self.inner.transport {
            Transport::Local { broker, session } => broker.set_alias(Caller::Session(*session), node, external, internal),
            Transport::Tcp(s) => {
                let frame = Frame::AliasSet {
                    node: node.to_string(),
                    external: external.to_string(),
                    internal: internal.to_string(),
                };
                Self::ack(s.request(frame)?).map(|_| ())
            }
        }
    }

    pub fn clear_alias(&self, node: &str, external: &TopicName) -> Result<(), BusError> {
        self.live()?;
        match &self.inner.transport {
            Transport::Local { broker, session } => broker.clear_alias(Caller::Session(*session), node, external),
            Transport::Tcp(s) => {
                let frame = Frame::AliasClear { node: node.to_string(), external: external.to_string() };
                Self::ack(s.request(frame)?).map(|_| ())
            }
        }
    }

    pub fn snapshot(&self) -> Result<GraphSnapshot, BusError> {
        self.live()?;
        match &self.inner.transport {
            Transport::Local { broker, .. } => Ok(broker.snapshot()),
            Transport::Tcp(s) => match s.request(Frame::SnapshotReq)? {
                Frame::SnapshotResp { json } => {
                    serde_json::from_str(&json).map_err(|e| BusError::Protocol(format!("bad snapshot: {e}")))
                }
                other => Err(BusError::Protocol(format!("unexpected reply kind {:#04x}", other.kind()))),
            },
        }
    }
}

fn connect_tcp(addr: &str, name: &str, pid: Option<u32>, subs: SubTable) -> Result<(Arc<TcpShared>, u64), BusError> {
    let unreachable = |e: std::io::Error| BusError::BrokerUnreachable(format!("{addr}: {e}"));
    let sock = addr
        .to_socket_addrs()
        .map_err(unreachable)?
        .next()
        .ok_or_else(|| BusError::BrokerUnreachable(format!("{addr}: no address")))?;
    let stream = TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT).map_err(unreachable)?;
    let _ = stream.set_nodelay(true);
    let mut out = BufWriter::with_capacity(64 * 1024, stream.try_clone().map_err(unreachable)?);
    Frame::Hello { node: name.to_string(), pid }
        .write_to(&mut out)
        .and_then(|_| out.flush())
        .map_err(unreachable)?;
    stream.set_read_timeout(Some(REQUEST_TIMEOUT)).map_err(unreachable)?;
    let mut reader = FrameReader::new(stream.try_clone().map_err(unreachable)?);
    let epoch = loop {
        match reader.read_frame().map_err(unreachable)? {
            ReadEvent::Frame(Ok(Frame::Ack { value, .. })) => break value,
            ReadEvent::Frame(Ok(Frame::Error { code, message })) => return Err(BusError::from_code(code, message)),
            ReadEvent::Frame(Ok(Frame::Ping)) => continue,
            ReadEvent::Frame(Ok(other)) => {
                return Err(BusError::Protocol(format!("unexpected handshake reply {:#04x}", other.kind())))
            }
            ReadEvent::Frame(Err(e)) => return Err(BusError::Protocol(e.to_string())),
            ReadEvent::Idle => return Err(BusError::BrokerUnreachable(format!("{addr}: handshake timed out"))),
            ReadEvent::Closed => return Err(BusError::BrokerUnreachable(format!("{addr}: closed during handshake"))),
        }
    };
    stream.set_read_timeout(None).map_err(unreachable)?;
    let shared = Arc::new(TcpShared {
        writer: Mutex::new(TcpWriter { out, seqs: HashMap::new() }),
        pending: Mutex::default(),
        closed: AtomicBool::new(false),
        last_async_error: Mutex::new(None),
        stream,
    });
    let reader_shared = shared.clone();
    thread::Builder::new()
        .name(format!("nw-client-{name}"))
        .spawn(move || read_loop(reader, reader_shared, subs))
        .map_err(|e| BusError::BrokerUnreachable(e.to_string()))?;
    Ok((shared, epoch))
}

fn read_loop(mut reader: FrameReader<TcpStream>, shared: Arc<TcpShared>, subs: SubTable) {
    loop {
        let frame = match reader.read_frame() {
            Ok(ReadEvent::Frame(Ok(f))) => f,
            Ok(ReadEvent::Frame(Err(e))) => {
                log::warn!("undecodable frame from broker: {e}");
                continue;
            }
            Ok(ReadEvent::Idle) => continue,
            Ok(ReadEvent::Closed) | Err(_) => break,
        };
        match frame {
            Frame::Deliver { topic, schema, seq, timestamp, payload, publisher, origin } => {
                let Ok(topic) = TopicName::parse(&topic) else { continue };
                if let Some(s) = subs.read().get(&topic) {
                    let envelope = Arc::new(Envelope {
                        topic: topic.clone(),
                        schema: (!schema.is_empty()).then_some(schema),
                        publisher,
                        seq,
                        timestamp,
                        payload,
                        origin,
                    });
                    s.queue.push(Delivery { topic, envelope });
                }
            }
            Frame::Ping => {
                let mut w = shared.writer.lock();
                let _ = Frame::Pong.write_to(&mut w.out).and_then(|_| w.out.flush());
            }
            Frame::Pong => {}
            Frame::Error { code, message } if code & ASYNC_ERROR_FLAG != 0 => {
                let e = BusError::from_code(code, message);
                log::warn!("publish rejected by broker: {e}");
                *shared.last_async_error.lock() = Some(e);
            }
            reply => match shared.pending.lock().pop_front() {
                Some(tx) => {
                    let _ = tx.try_send(Ok(reply));
                }
                None => log::warn!("unsolicited frame {:#04x} from broker", reply.kind()),
            },
        }
    }
    shared.fail_pending();
    for s in subs.read().values() {
        s.queue.close();
    }
}
