//! JSON over WebSocket. Requests are `{id, op, args}`; every request gets
//! exactly one `{id, ok, result | error}` reply. Events arrive as
//! `{event, data}` frames interleaved with replies.

use std::collections::{HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::os::fd::AsFd;
use std::os::unix::net::UnixStream;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use nix::poll::{poll, PollFd, PollFlags, PollTimeout};
use parking_lot::Mutex;
use serde_json::{json, Value as Json};
use tungstenite::{Message, WebSocket};

use super::exec::{ApiError, Controller, TapGuard};
use crate::bus::{Delivery, TopicName};

pub const DEFAULT_CONTROL_PORT: u16 = 11412;
/// Default `message-sample` rate per sampled topic.
pub const DEFAULT_SAMPLE_RATE: f64 = 10.0;

const POLL: Duration = Duration::from_millis(20);
/// Longest a server connection sleeps before rechecking for shutdown.
const IDLE_POLL_MS: u16 = 100;
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

fn reply(id: Json, result: Result<Json, ApiError>) -> Json {
    match result {
        Ok(r) => json!({ "id": id, "ok": true, "result": r }),
        Err(e) => json!({ "id": id, "ok": false, "error": e }),
    }
}

/// A running control API server.
pub struct ApiServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ApiServer {
    pub fn bind(addr: &str, controller: Arc<Controller>) -> io::Result<ApiServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new().name("nw-api-accept".into()).spawn(move || {
            let mut conns: Vec<JoinHandle<()>> = Vec::new();
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let (c, f) = (controller.clone(), flag.clone());
                        if let Ok(t) = thread::Builder::new().name("nw-api-conn".into()).spawn(move || serve(stream, c, f)) {
                            conns.push(t);
                        }
                        conns.retain(|t| !t.is_finished());
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => {
                        log::warn!("control api accept: {e}");
                        thread::sleep(POLL);
                    }
                }
            }
            for t in conns {
                let _ = t.join();
            }
        })?;
        Ok(ApiServer { addr, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Sampler {
    _guard: TapGuard,
}

/// Frames bound for one connection. Sending also wakes its IO loop.
#[derive(Clone)]
struct Outbox {
    tx: Sender<Json>,
    wake: Arc<UnixStream>,
}

impl Outbox {
    fn send(&self, frame: Json) -> bool {
        let ok = self.tx.send(frame).is_ok();
        // A full wake pipe already guarantees a wake-up.
        let _ = (&*self.wake).write(&[1]);
        ok
    }
}

fn serve(stream: TcpStream, controller: Arc<Controller>, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("control api handshake: {e}");
            return;
        }
    };
    let Ok((wake_rx, wake_tx)) = UnixStream::pair() else { return };
    if ws.get_ref().set_nonblocking(true).is_err() || wake_rx.set_nonblocking(true).is_err() || wake_tx.set_nonblocking(true).is_err() {
        return;
    }
    let (out_tx, out_rx) = mpsc::channel::<Json>();
    let outbox = Outbox { tx: out_tx, wake: Arc::new(wake_tx) };
    let closed = Arc::new(AtomicBool::new(false));
    let forwarder = {
        let (events, out, closed) = (controller.events().subscribe(), outbox.clone(), closed.clone());
        thread::Builder::new().name("nw-api-events".into()).spawn(move || {
            while !closed.load(Ordering::SeqCst) {
                match events.recv_timeout(POLL) {
                    Ok(ev) => {
                        if !out.send(json!({ "event": ev.event, "data": ev.data })) {
                            break;
                        }
                    }
                    Err(mpsc::RecvTimeoutError::Timeout) => {}
                    Err(mpsc::RecvTimeoutError::Disconnected) => break,
                }
            }
        })
    };
    let (req_tx, req_rx) = mpsc::channel::<Json>();
    let worker = {
        let (c, out) = (controller.clone(), outbox.clone());
        thread::Builder::new().name("nw-api-worker".into()).spawn(move || {
            let samplers: Mutex<HashMap<String, Sampler>> = Mutex::default();
            for req in req_rx {
                let id = req.get("id").cloned().unwrap_or(Json::Null);
                let op = req.get("op").and_then(Json::as_str).unwrap_or_default().to_string();
                let args = req.get("args").cloned().unwrap_or(Json::Null);
                let result = match op.as_str() {
                    "sample.start" => sample_start(&c, &samplers, &args, &out),
                    "sample.stop" => {
                        let topic = args.get("topic").and_then(Json::as_str).unwrap_or_default();
                        match samplers.lock().remove(topic) {
                            Some(_) => Ok(json!({})),
                            None => Err(ApiError::new("NoSuchTopic", format!("not sampling {topic}"))),
                        }
                    }
                    _ => c.execute(&op, &args),
                };
                if !out.send(reply(id, result)) {
                    break;
                }
            }
        })
    };
    if let (Ok(worker), Ok(forwarder)) = (worker, forwarder) {
        io_loop(&mut ws, &wake_rx, &out_rx, &req_tx, &outbox, &stop);
        closed.store(true, Ordering::SeqCst);
        drop(req_tx);
        let _ = worker.join();
        let _ = forwarder.join();
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(e) if e.kind() == io::ErrorKind::WouldBlock)
}

/// Drive one nonblocking connection: flush queued frames, read whatever
/// arrived, then sleep in `poll` until the socket or the outbox is ready.
fn io_loop(
    ws: &mut WebSocket<TcpStream>,
    wake: &UnixStream,
    out_rx: &Receiver<Json>,
    req_tx: &Sender<Json>,
    outbox: &Outbox,
    stop: &AtomicBool,
) {
    loop {
        if stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return;
        }
        let mut drain = [0u8; 256];
        while matches!((&*wake).read(&mut drain), Ok(n) if n > 0) {}
        while let Ok(frame) = out_rx.try_recv() {
            match ws.write(Message::text(frame.to_string())) {
                Ok(()) => {}
                Err(e) if would_block(&e) => {}
                Err(_) => return,
            }
        }
        let pending_write = match ws.flush() {
            Ok(()) => false,
            Err(e) if would_block(&e) => true,
            Err(_) => return,
        };
        loop {
            match ws.read() {
                Ok(Message::Text(text)) => match serde_json::from_str::<Json>(&text) {
                    Ok(req) if req.get("op").and_then(Json::as_str).is_some() => {
                        let _ = req_tx.send(req);
                    }
                    Ok(req) => {
                        let id = req.get("id").cloned().unwrap_or(Json::Null);
                        outbox.send(reply(id, Err(ApiError::new("BadRequest", "missing `op`"))));
                    }
                    Err(e) => {
                        outbox.send(reply(Json::Null, Err(ApiError::new("MalformedJson", e.to_string()))));
                    }
                },
                Ok(Message::Binary(_)) => {
                    outbox.send(reply(Json::Null, Err(ApiError::new("MalformedJson", "binary frames are not accepted"))));
                }
                Ok(Message::Close(_)) => {
                    let _ = ws.flush();
                    return;
                }
                Ok(_) => {}
                Err(e) if would_block(&e) => break,
                Err(_) => return,
            }
        }
        let sock_flags = if pending_write { PollFlags::POLLIN | PollFlags::POLLOUT } else { PollFlags::POLLIN };
        let mut fds = [PollFd::new(ws.get_ref().as_fd(), sock_flags), PollFd::new(wake.as_fd(), PollFlags::POLLIN)];
        match poll(&mut fds, PollTimeout::from(IDLE_POLL_MS)) {
            Ok(_) | Err(nix::errno::Errno::EINTR) => {}
            Err(e) => {
                log::warn!("control api poll: {e}");
                return;
            }
        }
    }
}

fn sample_start(c: &Controller, samplers: &Mutex<HashMap<String, Sampler>>, args: &Json, out: &Outbox) -> Result<Json, ApiError> {
    let topic = args.get("topic").and_then(Json::as_str).ok_or_else(|| ApiError::new("BadArguments", "missing `topic`"))?;
    let t = TopicName::parse(topic)?;
    let rate = args.get("rate").and_then(Json::as_f64).unwrap_or(DEFAULT_SAMPLE_RATE);
    let period = Duration::try_from_secs_f64(1.0 / rate)
        .ok()
        .filter(|_| rate > 0.0 && rate.is_finite())
        .ok_or_else(|| ApiError::new("BadArguments", "`rate` must be positive"))?;
    let last: Mutex<Option<Instant>> = Mutex::new(None);
    let out = Mutex::new(out.clone());
    let schemas = c.runtime().schemas.clone();
    let guard = c.tap(
        &t,
        Arc::new(move |d: &Delivery| {
            let now = Instant::now();
            {
                let mut l = last.lock();
                if l.is_some_and(|p| now.duration_since(p) < period) {
                    return;
                }
                *l = Some(now);
            }
            let text = d
                .envelope
                .schema
                .as_deref()
                .and_then(|s| schemas.layout(s))
                .and_then(|l| crate::schema::decode(&l, &d.envelope.payload).ok().map(|m| crate::schema::render_message(&l, &m)));
            let frame = json!({
                "event": "message-sample",
                "data": {
                    "topic": d.topic,
                    "schema": d.envelope.schema,
                    "publisher": d.envelope.publisher,
                    "seq": d.envelope.seq,
                    "timestamp": d.envelope.timestamp,
                    "text": text,
                },
            });
            out.lock().send(frame);
        }),
    )?;
    samplers.lock().insert(t.as_str().to_string(), Sampler { _guard: guard });
    Ok(json!({ "topic": t, "rate": rate }))
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connect: {0}")]
    Connect(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for a reply")]
    Timeout,
    #[error(transparent)]
    Api(#[from] ApiError),
}

/// Blocking control API client. Events that arrive while waiting for a
/// reply are queued for [`ApiClient::next_event`].
pub struct ApiClient {
    ws: WebSocket<TcpStream>,
    next_id: u64,
    events: VecDeque<(String, Json)>,
    pub reply_timeout: Duration,
}

impl ApiClient {
    /// `url` is `ws://host:port`.
    pub fn connect(url: &str) -> Result<ApiClient, ClientError> {
        let hostport = url.strip_prefix("ws://").unwrap_or(url).trim_end_matches('/');
        let stream = TcpStream::connect(hostport).map_err(|e| ClientError::Connect(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (ws, _) = tungstenite::client(format!("ws://{hostport}/"), stream).map_err(|e| ClientError::Connect(e.to_string()))?;
        ws.get_ref().set_read_timeout(Some(POLL)).map_err(|e| ClientError::Connect(e.to_string()))?;
        Ok(ApiClient { ws, next_id: 1, events: VecDeque::new(), reply_timeout: Duration::from_secs(60) })
    }

    /// Send a raw text frame.
    pub fn send_text(&mut self, text: &str) -> Result<(), ClientError> {
        self.ws.send(Message::text(text)).map_err(|_| ClientError::Closed)
    }

    /// Next non-event frame.
    pub fn next_reply(&mut self, timeout: Duration) -> Result<Json, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.read_frame(deadline)? {
                Some(v) if v.get("event").is_some() => self.queue_event(v),
                Some(v) => return Ok(v),
                None => return Err(ClientError::Timeout),
            }
        }
    }

    fn queue_event(&mut self, v: Json) {
        let name = v["event"].as_str().unwrap_or_default().to_string();
        self.events.push_back((name, v.get("data").cloned().unwrap_or(Json::Null)));
    }

    fn read_frame(&mut self, deadline: Instant) -> Result<Option<Json>, ClientError> {
        loop {
            if Instant::now() >= deadline {
                return Ok(None);
            }
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    if let Ok(v) = serde_json::from_str(&t) {
                        return Ok(Some(v));
                    }
                }
                Ok(Message::Close(_)) => return Err(ClientError::Closed),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => return Err(ClientError::Closed),
            }
        }
    }

    /// Send one request and wait for its reply.
    pub fn request(&mut self, op: &str, args: Json) -> Result<Json, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        self.send_text(&json!({ "id": id, "op": op, "args": args }).to_string())?;
        let deadline = Instant::now() + self.reply_timeout;
        loop {
            let Some(v) = self.read_frame(deadline)? else { return Err(ClientError::Timeout) };
            if v.get("event").is_some() {
                self.queue_event(v);
                continue;
            }
            if v.get("id").and_then(Json::as_u64) != Some(id) {
                continue;
            }
            if v["ok"].as_bool() == Some(true) {
                return Ok(v.get("result").cloned().unwrap_or(Json::Null));
            }
            let e: ApiError = serde_json::from_value(v["error"].clone())
                .unwrap_or_else(|_| ApiError::new("Unknown", v["error"].to_string()));
            return Err(ClientError::Api(e));
        }
    }

    /// Next event, optionally only of kind `name`; other kinds are skipped.
    pub fn next_event(&mut self, name: Option<&str>, timeout: Duration) -> Result<Option<Json>, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            while let Some((n, d)) = self.events.pop_front() {
                if name.is_none_or(|w| w == n) {
                    return Ok(Some(json!({ "event": n, "data": d })));
                }
            }
            match self.read_frame(deadline)? {
                Some(v) if v.get("event").is_some() => self.queue_event(v),
                Some(_) => {}
                None => return Ok(None),
            }
        }
    }

    /// Drop queued events.
    pub fn clear_events(&mut self) {
        self.events.clear();
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}
