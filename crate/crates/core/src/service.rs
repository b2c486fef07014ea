//! Live sessions over TCP.
//!
//! Every message in both directions is a 4-byte big-endian length followed by
//! that many bytes of UTF-8 JSON. Each connection owns one [`Session`]; a
//! reader thread feeds client events into a bounded queue that the generation
//! worker drains at block boundaries.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::CacheDump;
use crate::camera::ActionSegment;
use crate::checkpoint::{load_model, TensorArchive};
use crate::engine::{Session, SessionTemplate, TurnEvent};
use crate::error::{invalid, Error, Result};
use crate::model::{FrameBlock, WorldModel};
use crate::tensor::Scalar;

pub const MAX_FRAME_BYTES: usize = 16 << 20;

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME_BYTES)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "message too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame; `None` on a clean end of stream before the length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame exceeds size limit"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_message<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<()> {
    write_frame(w, &serde_json::to_vec(msg)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientEvent {
    Action { segments: Vec<ActionSegment> },
    Prompt { text: String },
    Reset { seed: u64 },
    Pause,
    Resume,
}

impl ClientEvent {
    pub fn validate(&self) -> Result<()> {
        match self {
            ClientEvent::Action { segments } => {
                if segments.is_empty() {
                    return Err(invalid("action event needs at least one segment"));
                }
                segments.iter().try_for_each(ActionSegment::validate)
            }
            ClientEvent::Prompt { text } if text.trim().is_empty() => Err(invalid("prompt text is empty")),
            _ => Ok(()),
        }
    }

    pub fn parse(body: &[u8]) -> Result<Self> {
        let ev: ClientEvent = serde_json::from_slice(body)?;
        ev.validate()?;
        Ok(ev)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Applied,
    /// Replaced by a later event of the same kind before the boundary.
    Superseded,
    /// Accepted while paused; a second ack follows when it applies.
    Queued,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheReason {
    Init,
    Append,
    Recache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Block {
        block_index: usize,
        /// `[qw, qx, qy, qz, px, py, pz]` per frame.
        poses: Vec<[f64; 7]>,
        /// Per frame, one byte per token: channel mean scaled by the block's min/max.
        frames_u8: Vec<Vec<u8>>,
        ms: f64,
    },
    CacheState {
        block_index: usize,
        reason: CacheReason,
        #[serde(flatten)]
        cache: CacheDump,
    },
    TurnAck {
        status: AckStatus,
        block_index: usize,
        event: ClientEvent,
    },
    Error {
        message: String,
    },
    Stats {
        fps: f64,
        ms_per_block: f64,
        blocks: usize,
        dropped: u64,
    },
}

impl ServerMessage {
    fn error(e: impl std::fmt::Display) -> Self {
        ServerMessage::Error { message: e.to_string() }
    }

    fn is_block(&self) -> bool {
        matches!(self, ServerMessage::Block { .. })
    }
}

pub fn heatmap_u8<F: Scalar>(block: &FrameBlock<F>) -> Vec<Vec<u8>> {
    let means: Vec<Vec<f64>> = block
        .frames
        .iter()
        .map(|f| {
            (0..f.rows())
                .map(|r| f.row(r).iter().map(|v| v.as_f64()).sum::<f64>() / f.cols() as f64)
                .collect()
        })
        .collect();
    let (lo, hi) = means
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    means
        .iter()
        .map(|m| {
            m.iter()
                .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
                .collect()
        })
        .collect()
}

/// Rebuilds the applied event list of the most recent session in a
/// transcript of server messages, ready for [`SessionTemplate::replay`].
pub fn transcript_events(messages: &[ServerMessage]) -> Vec<TurnEvent> {
    let start = messages
        .iter()
        .rposition(|m| {
            matches!(m, ServerMessage::TurnAck { status: AckStatus::Applied, event: ClientEvent::Reset { .. }, .. })
        })
        .map_or(0, |i| i + 1);
    let mut events: Vec<TurnEvent> = Vec::new();
    for m in &messages[start..] {
        let ServerMessage::TurnAck {
            status: AckStatus::Applied,
            block_index,
            event,
        } = m
        else {
            continue;
        };
        let slot = match events.last_mut() {
            Some(e) if e.at_block == *block_index => e,
            _ => {
                if !matches!(event, ClientEvent::Action { .. } | ClientEvent::Prompt { .. }) {
                    continue;
                }
                events.push(TurnEvent {
                    at_block: *block_index,
                    new_segments: None,
                    new_prompt: None,
                });
                events.last_mut().expect("just pushed")
            }
        };
        match event {
            ClientEvent::Action { segments } => slot.new_segments = Some(segments.clone()),
            ClientEvent::Prompt { text } => slot.new_prompt = Some(text.clone()),
            _ => {}
        }
    }
    events
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub template: SessionTemplate,
    /// Blocks generated per session before it idles; `None` for no limit.
    pub max_blocks: Option<usize>,
    /// Minimum wall time per block; 0 generates as fast as possible.
    pub pace_ms: f64,
    pub event_queue: usize,
    /// Outbound messages buffered per client before blocks are dropped.
    pub outbound_queue: usize,
    /// When set, each block's full-precision latents are written here.
    pub dump_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            template: SessionTemplate::default(),
            max_blocks: None,
            pace_ms: 0.0,
            event_queue: 64,
            outbound_queue: 256,
            dump_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.event_queue == 0 || self.outbound_queue == 0 {
            return Err(invalid("queue capacities must be positive"));
        }
        if !(self.pace_ms.is_finite() && self.pace_ms >= 0.0) {
            return Err(invalid("pace_ms must be a non-negative number"));
        }
        self.template.pose()?;
        Ok(())
    }
}

struct OutboxState {
    queue: VecDeque<ServerMessage>,
    dropped: u64,
    closed: bool,
}

/// Bounded outbound queue that sheds the oldest block messages when full.
struct Outbox {
    state: Mutex<OutboxState>,
    ready: Condvar,
    capacity: usize,
}

impl Outbox {
    fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(OutboxState {
                queue: VecDeque::new(),
                dropped: 0,
                closed: false,
            }),
            ready: Condvar::new(),
            capacity,
        }
    }

    fn push(&self, msg: ServerMessage) {
        let mut s = self.state.lock().expect("outbox lock");
        if s.closed {
            return;
        }
        if s.queue.len() >= self.capacity {
            if let Some(pos) = s.queue.iter().position(ServerMessage::is_block) {
                s.queue.remove(pos);
                s.dropped += 1;
            } else if msg.is_block() {
                s.dropped += 1;
                return;
            }
        }
        s.queue.push_back(msg);
        self.ready.notify_one();
    }

    fn pop(&self) -> Option<ServerMessage> {
        let mut s = self.state.lock().expect("outbox lock");
        loop {
            if let Some(m) = s.queue.pop_front() {
                return Some(m);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).expect("outbox lock");
        }
    }

    fn close(&self) {
        self.state.lock().expect("outbox lock").closed = true;
        self.ready.notify_all();
    }

    fn closed(&self) -> bool {
        self.state.lock().expect("outbox lock").closed
    }

    fn dropped(&self) -> u64 {
        self.state.lock().expect("outbox lock").dropped
    }
}

#[derive(Default)]
struct Pending {
    action: Option<ClientEvent>,
    prompt: Option<ClientEvent>,
}

struct Worker<F: Scalar> {
    model: Arc<WorldModel<F>>,
    config: Arc<ServiceConfig>,
    outbox: Arc<Outbox>,
    session: Option<Session<F>>,
    paused: bool,
    pending: Pending,
    dump: Option<PathBuf>,
    conn_id: u64,
    resets: u64,
}

impl<F: Scalar> Worker<F> {
    fn boundary(&self) -> usize {
        self.session.as_ref().map_or(0, Session::next_block_index)
    }

    fn ack(&self, status: AckStatus, block_index: usize, event: ClientEvent) {
        self.outbox.push(ServerMessage::TurnAck {
            status,
            block_index,
            event,
        });
    }

    fn cache_state(&self, reason: CacheReason) {
        if let Some(s) = &self.session {
            self.outbox.push(ServerMessage::CacheState {
                block_index: s.next_block_index(),
                reason,
                cache: s.cache().dump(),
            });
        }
    }

    fn runnable(&self) -> bool {
        match &self.session {
            Some(s) => !self.paused && self.config.max_blocks.is_none_or(|m| s.next_block_index() < m),
            None => false,
        }
    }

    fn handle(&mut self, ev: ClientEvent) {
        match ev {
            ClientEvent::Reset { seed } => match self.config.template.start(self.model.clone(), seed) {
                Ok(s) => {
                    for old in [self.pending.action.take(), self.pending.prompt.take()].into_iter().flatten() {
                        self.ack(AckStatus::Superseded, self.boundary(), old);
                    }
                    self.session = Some(s);
                    self.paused = false;
                    self.resets += 1;
                    self.dump = self.config.dump_dir.as_ref().map(|d| {
                        d.join(format!("conn{}", self.conn_id)).join(format!("session{}", self.resets))
                    });
                    self.ack(AckStatus::Applied, 0, ev);
                    self.cache_state(CacheReason::Init);
                }
                Err(e) => self.outbox.push(ServerMessage::error(e)),
            },
            ClientEvent::Pause | ClientEvent::Resume => {
                self.paused = matches!(ev, ClientEvent::Pause);
                self.ack(AckStatus::Applied, self.boundary(), ev);
            }
            ClientEvent::Action { .. } | ClientEvent::Prompt { .. } => {
                if self.session.is_none() {
                    self.outbox.push(ServerMessage::error("no active session; send a reset event first"));
                    return;
                }
                let slot = match ev {
                    ClientEvent::Action { .. } => &mut self.pending.action,
                    _ => &mut self.pending.prompt,
                };
                let old = slot.replace(ev.clone());
                if let Some(old) = old {
                    self.ack(AckStatus::Superseded, self.boundary(), old);
                }
                if self.paused {
                    self.ack(AckStatus::Queued, self.boundary(), ev);
                }
            }
        }
    }

    fn apply_pending(&mut self) {
        let Some(session) = self.session.as_mut() else {
            return;
        };
        let b = session.next_block_index();
        let mut acks = Vec::new();
        let mut recached = false;
        if let Some(ev @ ClientEvent::Action { .. }) = self.pending.action.take() {
            let ClientEvent::Action { segments } = &ev else { unreachable!() };
            match session.switch_action(segments) {
                Ok(()) => acks.push(Ok(ev)),
                Err(e) => acks.push(Err(e)),
            }
        }
        if let Some(ev @ ClientEvent::Prompt { .. }) = self.pending.prompt.take() {
            let ClientEvent::Prompt { text } = &ev else { unreachable!() };
            match session.switch_prompt(text) {
                Ok(()) => {
                    recached = true;
                    acks.push(Ok(ev));
                }
                Err(e) => acks.push(Err(e)),
            }
        }
        for a in acks {
            match a {
                Ok(ev) => self.ack(AckStatus::Applied, b, ev),
                Err(e) => self.outbox.push(ServerMessage::error(e)),
            }
        }
        if recached {
            self.cache_state(CacheReason::Recache);
        }
    }

    fn generate(&mut self) -> Result<()> {
        let started = Instant::now();
        self.apply_pending();
        let session = self.session.as_mut().expect("runnable implies a session");
        let block = session.rollout_block()?;
        let k = block.len();
        let poses = session.trajectory().poses();
        let poses = poses[poses.len() - k..].iter().map(|p| p.to_array()).collect();
        let stats = session.stats().clone();
        if let Some(dir) = &self.dump {
            dump_block(dir, &block)?;
        }
        self.outbox.push(ServerMessage::Block {
            block_index: block.block_index,
            poses,
            frames_u8: heatmap_u8(&block),
            ms: stats.last_block_ms,
        });
        self.cache_state(CacheReason::Append);
        self.outbox.push(ServerMessage::Stats {
            fps: stats.fps,
            ms_per_block: stats.ms_per_block,
            blocks: stats.blocks,
            dropped: self.outbox.dropped(),
        });
        let pace = Duration::from_secs_f64(self.config.pace_ms / 1000.0);
        if let Some(rest) = pace.checked_sub(started.elapsed()) {
            thread::sleep(rest);
        }
        Ok(())
    }

    fn run(mut self, events: Receiver<ClientEvent>) {
        loop {
            if self.outbox.closed() {
                return;
            }
            if !self.runnable() {
                match events.recv_timeout(Duration::from_millis(50)) {
                    Ok(ev) => self.handle(ev),
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            }
            while let Ok(ev) = events.try_recv() {
                self.handle(ev);
            }
            if self.runnable() {
                if let Err(e) = self.generate() {
                    self.outbox.push(ServerMessage::error(format!("generation failed: {e}")));
                    self.session = None;
                }
            }
        }
    }
}

/// Writes a block's latents as `block_<index>.wlta` under `dir`.
pub fn dump_block<F: Scalar>(dir: &Path, block: &FrameBlock<F>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut a = TensorArchive::new(serde_json::json!({ "block_index": block.block_index }));
    for (i, f) in block.frames.iter().enumerate() {
        a.push_mat(format!("frame.{i}"), f)?;
    }
    a.save(dir.join(format!("block_{:05}.wlta", block.block_index)))
}

fn reader_loop(stream: TcpStream, events: SyncSender<ClientEvent>, outbox: Arc<Outbox>) {
    let mut r = BufReader::new(stream);
    loop {
        match read_frame(&mut r) {
            Ok(Some(body)) => match ClientEvent::parse(&body) {
                Ok(ev) => match events.try_send(ev) {
                    Ok(()) => {}
                    Err(TrySendError::Full(_)) => outbox.push(ServerMessage::error("event queue full; event dropped")),
                    Err(TrySendError::Disconnected(_)) => break,
                },
                Err(e) => outbox.push(ServerMessage::error(format!("malformed event: {e}"))),
            },
            Ok(None) | Err(_) => break,
        }
    }
    outbox.close();
}

fn writer_loop(stream: TcpStream, outbox: Arc<Outbox>) {
    let mut w = BufWriter::new(stream);
    while let Some(msg) = outbox.pop() {
        if write_message(&mut w, &msg).is_err() {
            break;
        }
    }
    outbox.close();
    let _ = w.get_ref().shutdown(Shutdown::Both);
}

fn handle_connection<F: Scalar>(stream: TcpStream, model: Arc<WorldModel<F>>, config: Arc<ServiceConfig>, conn_id: u64) {
    let _ = stream.set_nodelay(true);
    let (Ok(rs), Ok(ws)) = (stream.try_clone(), stream.try_clone()) else {
        return;
    };
    let outbox = Arc::new(Outbox::new(config.outbound_queue));
    let (tx, rx) = mpsc::sync_channel(config.event_queue);
    let reader = {
        let outbox = outbox.clone();
        thread::spawn(move || reader_loop(rs, tx, outbox))
    };
    let writer = {
        let outbox = outbox.clone();
        thread::spawn(move || writer_loop(ws, outbox))
    };
    let worker = Worker {
        model,
        config,
        outbox: outbox.clone(),
        session: None,
        paused: false,
        pending: Pending::default(),
        dump: None,
        conn_id,
        resets: 0,
    };
    worker.run(rx);
    outbox.close();
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader.join();
    let _ = writer.join();
}

pub struct Server<F: Scalar> {
    listener: TcpListener,
    model: Arc<WorldModel<F>>,
    config: Arc<ServiceConfig>,
}

impl<F: Scalar> Server<F> {
    pub fn bind(addr: impl ToSocketAddrs, model: Arc<WorldModel<F>>, config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let (layout, plucker) = (config.template.engine.layout, config.template.engine.plucker);
        if layout.layers != model.config.layers || plucker.token_grid != model.config.token_grid {
            return Err(invalid("service template does not match the model"));
        }
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            model,
            config: Arc::new(config),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until `stop` is set; one thread per connection.
    pub fn serve_until(self, stop: Arc<AtomicBool>) -> Result<()> {
        let ids = AtomicU64::new(0);
        for stream in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let (model, config) = (self.model.clone(), self.config.clone());
            let id = ids.fetch_add(1, Ordering::Relaxed);
            thread::spawn(move || handle_connection(stream, model, config, id));
        }
        Ok(())
    }

    pub fn serve(self) -> Result<()> {
        self.serve_until(Arc::new(AtomicBool::new(false)))
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || self.serve_until(flag));
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> Result<()> {
        let Some(t) = self.thread.take() else {
            return Ok(());
        };
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        t.join().map_err(|_| Error::Precondition("server thread panicked".into()))?
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Loads a checkpoint and binds; both failures surface before any client connects.
pub fn bind_with_checkpoint(addr: impl ToSocketAddrs, ckpt: impl AsRef<Path>, config: ServiceConfig) -> Result<Server<f64>> {
    let model = load_model::<f64>(ckpt)?;
    Server::bind(addr, Arc::new(model), config)
}

/// Blocking client for the wire protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> Result<()> {
        self.writer.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn send(&mut self, event: &ClientEvent) -> Result<()> {
        write_message(&mut self.writer, event)
    }

    pub fn send_raw(&mut self, body: &[u8]) -> Result<()> {
        write_frame(&mut self.writer, body)?;
        Ok(())
    }

    /// Next server message; `None` when the server closed the stream.
    pub fn recv(&mut self) -> Result<Option<ServerMessage>> {
        match read_frame(&mut self.reader)? {
            Some(body) => Ok(Some(serde_json::from_slice(&body)?)),
            None => Ok(None),
        }
    }

    /// Reads until `stop` accepts a message, returning everything read.
    pub fn recv_until(&mut self, mut stop: impl FnMut(&ServerMessage) -> bool) -> Result<Vec<ServerMessage>> {
        let mut out = Vec::new();
        while let Some(m) = self.recv()? {
            let done = stop(&m);
            out.push(m);
            if done {
                return Ok(out);
            }
        }
        Err(Error::Io(io::ErrorKind::UnexpectedEof.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ActionKey;

    #[test]
    fn framing_is_big_endian_length_prefixed() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        assert_eq!(buf, [0, 0, 0, 2, b'{', b'}']);
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"{}");
        assert!(read_frame(&mut r).unwrap().is_none());
        let mut truncated: &[u8] = &[0, 0, 0, 5, b'a'];
        assert!(read_frame(&mut truncated).is_err());
        let mut huge: &[u8] = &[0xff, 0xff, 0xff, 0xff];
        assert!(read_frame(&mut huge).is_err());
    }

    #[test]
    fn client_events_parse_the_documented_bodies() {
        let a = ClientEvent::parse(br#"{"kind":"action","segments":[{"key":"W","duration":25,"linear_speed":0.05}]}"#).unwrap();
        let ClientEvent::Action { segments } = a else { panic!() };
        assert_eq!(segments[0].key, ActionKey::W);
        assert_eq!(segments[0].duration_frames, 25);
        assert_eq!(
            ClientEvent::parse(br#"{"kind":"prompt","text":"draw a torch"}"#).unwrap(),
            ClientEvent::Prompt { text: "draw a torch".into() }
        );
        assert_eq!(ClientEvent::parse(br#"{"kind":"reset","seed":7}"#).unwrap(), ClientEvent::Reset { seed: 7 });
        assert_eq!(ClientEvent::parse(br#"{"kind":"pause"}"#).unwrap(), ClientEvent::Pause);
        for bad in [
            &br#"{"kind":"prompt","seed":7}"#[..],
            br#"{"kind":"reset","seed":7,"text":"x"}"#,
            br#"{"kind":"action","segments":[]}"#,
            br#"{"kind":"jump"}"#,
            b"not json",
        ] {
            assert!(ClientEvent::parse(bad).is_err(), "{}", String::from_utf8_lossy(bad));
        }
    }

    #[test]
    fn server_messages_round_trip() {
        let m = ServerMessage::Stats {
            fps: 16.3,
            ms_per_block: 40.0,
            blocks: 3,
            dropped: 0,
        };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.starts_with(r#"{"kind":"stats""#));
        assert_eq!(serde_json::from_str::<ServerMessage>(&text).unwrap(), m);
    }

    #[test]
    fn outbox_drops_oldest_blocks_first() {
        let o = Outbox::new(2);
        let block = |i| ServerMessage::Block {
            block_index: i,
            poses: vec![],
            frames_u8: vec![],
            ms: 0.0,
        };
        o.push(block(0));
        o.push(ServerMessage::error("e"));
        o.push(block(1));
        assert_eq!(o.dropped(), 1);
        assert!(matches!(o.pop(), Some(ServerMessage::Error { .. })));
        assert!(matches!(o.pop(), Some(ServerMessage::Block { block_index: 1, .. })));
    }

    #[test]
    fn transcript_merges_acks_per_boundary() {
        let act = ClientEvent::Action {
            segments: vec![ActionSegment::new(ActionKey::W, 3)],
        };
        let prompt = ClientEvent::Prompt { text: "fire".into() };
        let ack = |status, block_index, event: &ClientEvent| ServerMessage::TurnAck {
            status,
            block_index,
            event: event.clone(),
        };
        let msgs = vec![
            ack(AckStatus::Applied, 0, &ClientEvent::Reset { seed: 1 }),
            ack(AckStatus::Applied, 0, &act),
            ack(AckStatus::Applied, 0, &ClientEvent::Reset { seed: 7 }),
            ack(AckStatus::Superseded, 1, &act),
            ack(AckStatus::Applied, 2, &act),
            ack(AckStatus::Applied, 2, &prompt),
            ack(AckStatus::Applied, 4, &ClientEvent::Pause),
        ];
        let ev = transcript_events(&msgs);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].at_block, 2);
        assert!(ev[0].new_segments.is_some() && ev[0].new_prompt.as_deref() == Some("fire"));
    }
}
