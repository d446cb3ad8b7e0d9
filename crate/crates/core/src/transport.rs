//! Reliable frame streams over TCP: one [`Sender`] fanning out to many
//! [`ReceiverSession`]s.
//!
//! A connection starts with the client sending `TSRM-SUB v1 <kinds>\n`, where
//! `<kinds>` is a decimal bitmask (1 audio, 2 video, 4 metadata), and the
//! server answering `OK\n`. From then on the server writes a plain
//! concatenation of encoded frames. Every subscriber receives the identical
//! byte stream; the receiving side applies its kind filter after decoding.
//!
//! Each subscriber has its own writer thread and byte queue. A subscriber
//! whose queue would exceed the high-water mark is disconnected, so
//! [`Sender::send_frame`] never waits on a slow reader.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::discovery::{self, Announcer, DiscoveryConfig, SourceAdvertisement};
use crate::frames::{self, CodecError, EncodedFrame, Frame, FrameHeader, FrameKind, HEADER_LEN};

pub const DEFAULT_HIGH_WATER_MARK: usize = 8 * 1024 * 1024;
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(3);
pub const DEFAULT_RECEIVE_QUEUE: usize = 1024;
const SUBSCRIBE_PREFIX: &str = "TSRM-SUB v1 ";
const MAX_PREAMBLE: usize = 64;
const WRITE_TIMEOUT: Duration = Duration::from_secs(5);
const ACCEPT_TICK: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("connect to {addr} failed: {reason}")]
    Connect { addr: SocketAddr, reason: String },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Discovery(#[from] discovery::DiscoveryError),
}

/// Set of frame kinds a receiver wants delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KindMask(u8);

impl KindMask {
    pub const ALL: KindMask = KindMask(0b111);
    pub const NONE: KindMask = KindMask(0);

    pub fn only(kind: FrameKind) -> Self {
        KindMask(1 << kind as u8)
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0b111).then_some(KindMask(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn with(self, kind: FrameKind) -> Self {
        KindMask(self.0 | 1 << kind as u8)
    }

    pub fn contains(self, kind: FrameKind) -> bool {
        self.0 & (1 << kind as u8) != 0
    }
}

impl Default for KindMask {
    fn default() -> Self {
        KindMask::ALL
    }
}

impl FromStr for KindMask {
    type Err = String;

    /// Comma-separated kind names, or `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mask = KindMask::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            mask = match part {
                "all" => KindMask::ALL,
                "audio" => mask.with(FrameKind::Audio),
                "video" => mask.with(FrameKind::Video),
                "metadata" => mask.with(FrameKind::Metadata),
                other => return Err(format!("unknown frame kind {other:?}")),
            };
        }
        if mask == KindMask::NONE {
            return Err("no frame kinds selected".into());
        }
        Ok(mask)
    }
}

impl fmt::Display for KindMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = FrameKind::ALL.iter().filter(|k| self.contains(**k)).map(|k| k.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct SenderConfig {
    pub name: String,
    pub group: String,
    pub bind_ip: IpAddr,
    /// 0 picks an ephemeral port.
    pub port: u16,
    /// Host written into announcements. Defaults to `bind_ip`; an
    /// unspecified address lets finders substitute the datagram source.
    pub advertise_host: Option<IpAddr>,
    /// `None` disables announcing.
    pub discovery: Option<DiscoveryConfig>,
    pub high_water_mark: usize,
}

impl SenderConfig {
    pub fn new(name: &str) -> Self {
        SenderConfig {
            name: name.to_string(),
            group: discovery::DEFAULT_GROUP.to_string(),
            bind_ip: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            port: 0,
            advertise_host: None,
            discovery: None,
            high_water_mark: DEFAULT_HIGH_WATER_MARK,
        }
    }

    pub fn group(mut self, group: &str) -> Self {
        self.group = group.to_string();
        self
    }

    pub fn port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    pub fn bind_ip(mut self, ip: IpAddr) -> Self {
        self.bind_ip = ip;
        self
    }

    pub fn announce(mut self, cfg: DiscoveryConfig) -> Self {
        self.discovery = Some(cfg);
        self
    }

    pub fn high_water_mark(mut self, bytes: usize) -> Self {
        self.high_water_mark = bytes;
        self
    }
}

#[derive(Default)]
struct QueueState {
    frames: VecDeque<Arc<[u8]>>,
    bytes: usize,
    closing: bool,
    dead: bool,
}

#[derive(Default)]
struct SubscriberQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

struct Subscriber {
    peer: SocketAddr,
    queue: Arc<SubscriberQueue>,
    stream: TcpStream,
    writer: Option<JoinHandle<()>>,
}

struct SenderShared {
    subscribers: Mutex<Vec<Subscriber>>,
    sent: [AtomicU64; 3],
    disconnected: AtomicU64,
    shutdown: AtomicBool,
    high_water_mark: usize,
}

/// The transmitting end of a stream.
pub struct Sender {
    shared: Arc<SenderShared>,
    accept: Option<JoinHandle<()>>,
    announcer: Option<Announcer>,
    advertisement: SourceAdvertisement,
    local_addr: SocketAddr,
}

/// Binds, starts accepting subscribers and, if configured, announcing.
pub fn create_sender(cfg: SenderConfig) -> Result<Sender, TransportError> {
    // Validate the names before touching the network.
    SourceAdvertisement::new(&cfg.name, &cfg.group, cfg.bind_ip, 1)?;
    let listener = TcpListener::bind((cfg.bind_ip, cfg.port))?;
    let local_addr = listener.local_addr()?;
    let host = cfg.advertise_host.unwrap_or(cfg.bind_ip);
    let advertisement = SourceAdvertisement::new(&cfg.name, &cfg.group, host, local_addr.port())?;

    let shared = Arc::new(SenderShared {
        subscribers: Mutex::new(Vec::new()),
        sent: Default::default(),
        disconnected: AtomicU64::new(0),
        shutdown: AtomicBool::new(false),
        high_water_mark: cfg.high_water_mark.max(1),
    });
    listener.set_nonblocking(true)?;
    let accept_shared = Arc::clone(&shared);
    let accept = thread::Builder::new()
        .name(format!("accept-{}", cfg.name))
        .spawn(move || accept_loop(listener, accept_shared))?;
    let announcer = match &cfg.discovery {
        Some(d) => Some(discovery::start_announcer(advertisement.clone(), d)?),
        None => None,
    };
    log::info!("sender {}/{} listening on {local_addr}", cfg.group, cfg.name);
    Ok(Sender { shared, accept: Some(accept), announcer, advertisement, local_addr })
}

fn accept_loop(listener: TcpListener, shared: Arc<SenderShared>) {
    while !shared.shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = Arc::clone(&shared);
                let spawned = thread::Builder::new().name(format!("handshake-{peer}")).spawn(move || {
                    if let Err(e) = admit(stream, peer, &shared) {
                        log::warn!("rejected subscriber {peer}: {e}");
                    }
                });
                if let Err(e) = spawned {
                    log::warn!("cannot spawn handshake thread: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_TICK),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(ACCEPT_TICK);
            }
        }
    }
}

fn read_line_bytewise(stream: &mut TcpStream) -> io::Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if stream.read(&mut byte)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed during handshake"));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > MAX_PREAMBLE {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "handshake line too long"));
        }
    }
    String::from_utf8(line).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "handshake not UTF-8"))
}

pub fn parse_subscribe_line(line: &str) -> Result<KindMask, String> {
    let bits = line.strip_prefix(SUBSCRIBE_PREFIX).ok_or_else(|| format!("bad preamble {line:?}"))?;
    bits.trim().parse::<u8>().ok().and_then(KindMask::from_bits).ok_or_else(|| format!("bad kind mask {bits:?}"))
}

fn admit(mut stream: TcpStream, peer: SocketAddr, shared: &Arc<SenderShared>) -> Result<(), TransportError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(DEFAULT_CONNECT_TIMEOUT))?;
    let line = read_line_bytewise(&mut stream)?;
    let mask = match parse_subscribe_line(&line) {
        Ok(m) => m,
        Err(e) => {
            let _ = stream.write_all(format!("ERR {e}\n").as_bytes());
            return Err(TransportError::Handshake(e));
        }
    };
    stream.set_read_timeout(None)?;
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    stream.set_nodelay(true)?;

    let queue = Arc::new(SubscriberQueue::default());
    let writer_stream = stream.try_clone()?;
    let mut subs = shared.subscribers.lock().unwrap();
    if shared.shutdown.load(Ordering::Relaxed) {
        return Ok(());
    }
    // Reply while holding the lock so no frame can precede "OK".
    stream.write_all(b"OK\n")?;
    let writer_queue = Arc::clone(&queue);
    let writer = thread::Builder::new()
        .name(format!("writer-{peer}"))
        .spawn(move || writer_loop(writer_stream, writer_queue))?;
    log::info!("subscriber {peer} joined (kinds {mask})");
    subs.push(Subscriber { peer, queue, stream, writer: Some(writer) });
    Ok(())
}

fn writer_loop(mut stream: TcpStream, queue: Arc<SubscriberQueue>) {
    loop {
        let next = {
            let mut st = queue.state.lock().unwrap();
            while st.frames.is_empty() && !st.closing && !st.dead {
                st = queue.ready.wait(st).unwrap();
            }
            if st.dead {
                return;
            }
            match st.frames.pop_front() {
                Some(f) => {
                    st.bytes -= f.len();
                    f
                }
                None => {
                    let _ = stream.flush();
                    let _ = stream.shutdown(Shutdown::Write);
                    return;
                }
            }
        };
        if let Err(e) = stream.write_all(&next) {
            log::debug!("subscriber write failed: {e}");
            let mut st = queue.state.lock().unwrap();
            st.dead = true;
            st.frames.clear();
            st.bytes = 0;
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
    }
}

impl Sender {
    pub fn advertisement(&self) -> &SourceAdvertisement {
        &self.advertisement
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn port(&self) -> u16 {
        self.local_addr.port()
    }

    /// Encodes `frame` once and queues it for every live subscriber.
    /// Fails only if the frame cannot be encoded.
    pub fn send_frame(&self, frame: &Frame) -> Result<(), CodecError> {
        let encoded = frames::encode_frame(frame)?;
        self.send_encoded(&encoded);
        Ok(())
    }

    /// Queues already-encoded bytes for every live subscriber.
    pub fn send_encoded(&self, frame: &EncodedFrame) {
        let bytes = frame.shared_bytes();
        let hwm = self.shared.high_water_mark;
        let mut subs = self.shared.subscribers.lock().unwrap();
        subs.retain_mut(|sub| {
            let mut st = sub.queue.state.lock().unwrap();
            if st.dead {
                drop(st);
                self.shared.disconnected.fetch_add(1, Ordering::Relaxed);
                log::info!("subscriber {} left", sub.peer);
                return false;
            }
            if st.bytes + bytes.len() > hwm {
                st.dead = true;
                st.frames.clear();
                st.bytes = 0;
                drop(st);
                sub.queue.ready.notify_one();
                let _ = sub.stream.shutdown(Shutdown::Both);
                self.shared.disconnected.fetch_add(1, Ordering::Relaxed);
                log::warn!("subscriber {} exceeded {hwm} queued bytes; disconnected", sub.peer);
                return false;
            }
            st.bytes += bytes.len();
            st.frames.push_back(Arc::clone(&bytes));
            drop(st);
            sub.queue.ready.notify_one();
            true
        });
        self.shared.sent[frame.kind().index()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.subscribers.lock().unwrap().len()
    }

    pub fn sent_frames(&self, kind: FrameKind) -> u64 {
        self.shared.sent[kind.index()].load(Ordering::Relaxed)
    }

    /// Subscribers dropped for errors or for exceeding the high-water mark.
    pub fn disconnected_subscribers(&self) -> u64 {
        self.shared.disconnected.load(Ordering::Relaxed)
    }

    pub fn wait_for_subscribers(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.subscriber_count() < n {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
        true
    }

    /// Stops accepting and announcing, flushes every subscriber queue and
    /// closes the connections.
    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        self.announcer.take();
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
        let subs: Vec<Subscriber> = std::mem::take(&mut *self.shared.subscribers.lock().unwrap());
        for mut sub in subs {
            sub.queue.state.lock().unwrap().closing = true;
            sub.queue.ready.notify_one();
            if let Some(w) = sub.writer.take() {
                let _ = w.join();
            }
        }
    }
}

impl Drop for Sender {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    pub kinds: KindMask,
    pub connect_timeout: Duration,
    /// Decoded frames buffered ahead of the application.
    pub queue_frames: usize,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            kinds: KindMask::ALL,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            queue_frames: DEFAULT_RECEIVE_QUEUE,
        }
    }
}

impl ReceiverConfig {
    pub fn kinds(mut self, kinds: KindMask) -> Self {
        self.kinds = kinds;
        self
    }
}

/// A frame as it came off the wire.
#[derive(Debug, Clone)]
pub struct Received {
    pub frame: Frame,
    pub encoded: EncodedFrame,
    /// When the last byte of the frame was read.
    pub received_at: Instant,
}

#[derive(Debug)]
pub enum Recv<T> {
    Frame(T),
    Timeout,
    EndOfStream,
}

impl<T> Recv<T> {
    pub fn into_frame(self) -> Option<T> {
        match self {
            Recv::Frame(f) => Some(f),
            _ => None,
        }
    }
}

enum ReaderEvent {
    Frame(Received),
    End(Option<String>),
}

#[derive(Default)]
struct ReceiverCounters {
    received: [AtomicU64; 3],
    discarded: AtomicU64,
}

/// The receiving end of one connection. Single consumer.
pub struct ReceiverSession {
    peer: SocketAddr,
    events: mpsc::Receiver<ReaderEvent>,
    ended: bool,
    end_reason: Option<String>,
    counters: Arc<ReceiverCounters>,
    stream: TcpStream,
    reader: Option<JoinHandle<()>>,
}

pub fn connect(cfg: &ReceiverConfig, source: &SourceAdvertisement) -> Result<ReceiverSession, TransportError> {
    connect_addr(cfg, source.endpoint())
}

pub fn connect_addr(cfg: &ReceiverConfig, addr: SocketAddr) -> Result<ReceiverSession, TransportError> {
    let fail = |reason: String| TransportError::Connect { addr, reason };
    let mut stream = TcpStream::connect_timeout(&addr, cfg.connect_timeout).map_err(|e| fail(e.to_string()))?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(cfg.connect_timeout))?;
    stream
        .write_all(format!("{SUBSCRIBE_PREFIX}{}\n", cfg.kinds.bits()).as_bytes())
        .map_err(|e| fail(e.to_string()))?;
    let reply = read_line_bytewise(&mut stream).map_err(|e| fail(format!("no handshake reply: {e}")))?;
    if reply != "OK" {
        return Err(TransportError::Handshake(reply));
    }
    stream.set_read_timeout(None)?;

    let counters = Arc::new(ReceiverCounters::default());
    let (tx, rx) = mpsc::sync_channel(cfg.queue_frames.max(1));
    let reader_stream = stream.try_clone()?;
    let kinds = cfg.kinds;
    let reader_counters = Arc::clone(&counters);
    let reader = thread::Builder::new()
        .name(format!("reader-{addr}"))
        .spawn(move || reader_loop(reader_stream, kinds, tx, reader_counters))?;
    Ok(ReceiverSession {
        peer: addr,
        events: rx,
        ended: false,
        end_reason: None,
        counters,
        stream,
        reader: Some(reader),
    })
}

fn read_frame(stream: &mut TcpStream) -> Result<Option<(Frame, EncodedFrame)>, String> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match stream.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(format!("stream ended {got} bytes into a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    let parsed = FrameHeader::parse(&header).map_err(|e| e.to_string())?;
    let mut buf = vec![0u8; parsed.frame_len()];
    buf[..HEADER_LEN].copy_from_slice(&header);
    stream
        .read_exact(&mut buf[HEADER_LEN..])
        .map_err(|e| format!("stream ended inside a {} frame: {e}", parsed.kind))?;
    let frame = frames::decode_payload(&parsed, &buf[HEADER_LEN..]).map_err(|e| e.to_string())?;
    Ok(Some((frame, EncodedFrame::from_validated(parsed.kind, buf))))
}

fn reader_loop(
    mut stream: TcpStream,
    kinds: KindMask,
    events: mpsc::SyncSender<ReaderEvent>,
    counters: Arc<ReceiverCounters>,
) {
    loop {
        match read_frame(&mut stream) {
            Ok(Some((frame, encoded))) => {
                let kind = frame.kind();
                counters.received[kind.index()].fetch_add(1, Ordering::Relaxed);
                if !kinds.contains(kind) {
                    counters.discarded.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                let ev = ReaderEvent::Frame(Received { frame, encoded, received_at: Instant::now() });
                if events.send(ev).is_err() {
                    return;
                }
            }
            Ok(None) => {
                let _ = events.send(ReaderEvent::End(None));
                return;
            }
            Err(reason) => {
                log::warn!("receive stream closed: {reason}");
                let _ = events.send(ReaderEvent::End(Some(reason)));
                return;
            }
        }
    }
}

impl ReceiverSession {
    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Next delivered frame with its wire bytes. A timeout leaves the session
    /// untouched; after end of stream every call returns `EndOfStream`.
    pub fn recv(&mut self, timeout: Duration) -> Recv<Received> {
        if self.ended {
            return Recv::EndOfStream;
        }
        match self.events.recv_timeout(timeout) {
            Ok(ReaderEvent::Frame(r)) => Recv::Frame(r),
            Ok(ReaderEvent::End(reason)) => {
                self.ended = true;
                self.end_reason = reason;
                Recv::EndOfStream
            }
            Err(RecvTimeoutError::Timeout) => Recv::Timeout,
            Err(RecvTimeoutError::Disconnected) => {
                self.ended = true;
                Recv::EndOfStream
            }
        }
    }

    pub fn recv_frame(&mut self, timeout: Duration) -> Recv<Frame> {
        match self.recv(timeout) {
            Recv::Frame(r) => Recv::Frame(r.frame),
            Recv::Timeout => Recv::Timeout,
            Recv::EndOfStream => Recv::EndOfStream,
        }
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    /// Why the stream ended, if it ended abnormally.
    pub fn end_reason(&self) -> Option<&str> {
        self.end_reason.as_deref()
    }

    /// Frames read off the wire per kind, filtered or not.
    pub fn received_frames(&self, kind: FrameKind) -> u64 {
        self.counters.received[kind.index()].load(Ordering::Relaxed)
    }

    /// Frames read and dropped by the kind filter.
    pub fn discarded_frames(&self) -> u64 {
        self.counters.discarded.load(Ordering::Relaxed)
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            // Unblock a reader stuck on a full channel.
            while self.events.try_recv().is_ok() {}
            drop(std::mem::replace(&mut self.events, mpsc::sync_channel(1).1));
            let _ = r.join();
        }
    }
}

impl Drop for ReceiverSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}
