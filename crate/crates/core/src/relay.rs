//! Pass-through relay with a tagging side chain.
//!
//! ```text
//! source ──► ingest ──────────────────────────────► output sender
//!              │ audio copy                ▲
//!              ▼                           │ metadata queue
//!          FrameRing ─► windowing ─► window queue ─► analysis worker
//! ```
//!
//! The ingest thread forwards every received frame's original bytes and
//! never waits on the side chain: the frame ring, window queue and metadata
//! queue all drop their oldest entry when full.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle, Thread};
use std::time::{Duration, Instant};

use crossbeam_queue::ArrayQueue;
use serde::Serialize;
use thiserror::Error;

use crate::discovery::{self, DiscoveryConfig, Finder, SourceAdvertisement};
use crate::frames::{self, EncodedFrame, Frame, FrameKind};
use crate::stats::{Histogram, Summary};
use crate::tagging::xml::build_metadata_xml;
use crate::tagging::{TaggerSpec, TaggingStage, DEFAULT_TOP_K};
use crate::transport::{self, ReceiverConfig, Recv, Sender, SenderConfig};
use crate::windowing::{FrameRing, SampleWindow, WindowConfig, Windower, DEFAULT_FRAME_RING_CAPACITY};

pub const DEFAULT_QUEUE_DEPTH: usize = 4;
pub const METADATA_QUEUE_DEPTH: usize = 16;
pub const BACKOFF_INITIAL: Duration = Duration::from_millis(500);
pub const BACKOFF_MAX: Duration = Duration::from_secs(8);
const INGEST_POLL: Duration = Duration::from_millis(10);
const WINDOWING_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("invalid relay configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot open output: {0}")]
    Output(#[from] transport::TransportError),
    #[error(transparent)]
    Discovery(#[from] discovery::DiscoveryError),
}

/// Where the relay reads from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputSpec {
    /// Resolved through discovery on every (re)connect.
    Named {
        group: String,
        name: String,
    },
    Addr(SocketAddr),
}

impl FromStr for InputSpec {
    type Err = String;

    /// `host:port`, `group/name`, or a bare name in the default group.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(addr) = s.parse::<SocketAddr>() {
            return Ok(InputSpec::Addr(addr));
        }
        let (group, name) = s.split_once('/').unwrap_or((discovery::DEFAULT_GROUP, s));
        // Reuse the advertisement rules for what a valid name looks like.
        SourceAdvertisement::new(name, group, IpAddr::V4(Ipv4Addr::LOCALHOST), 1).map_err(|e| e.to_string())?;
        Ok(InputSpec::Named { group: group.into(), name: name.into() })
    }
}

impl fmt::Display for InputSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSpec::Named { group, name } => write!(f, "{group}/{name}"),
            InputSpec::Addr(a) => write!(f, "{a}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub input: InputSpec,
    pub output_name: String,
    pub output_group: String,
    pub output_bind: IpAddr,
    /// 0 picks an ephemeral port.
    pub output_port: u16,
    pub window: WindowConfig,
    pub tagger: TaggerSpec,
    /// Windows waiting for the analysis worker.
    pub queue_depth: usize,
    pub top_k: usize,
    pub frame_ring_capacity: usize,
    /// `None` disables the periodic stats line.
    pub stats_interval: Option<Duration>,
    pub discovery: DiscoveryConfig,
    /// Announce the output on discovery.
    pub announce: bool,
}

impl RelayConfig {
    pub fn new(input: InputSpec, output_name: &str) -> Self {
        RelayConfig {
            input,
            output_name: output_name.to_string(),
            output_group: discovery::DEFAULT_GROUP.to_string(),
            output_bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            output_port: 0,
            window: WindowConfig::default(),
            tagger: TaggerSpec::Reference,
            queue_depth: DEFAULT_QUEUE_DEPTH,
            top_k: DEFAULT_TOP_K,
            frame_ring_capacity: DEFAULT_FRAME_RING_CAPACITY,
            stats_interval: Some(Duration::from_secs(5)),
            discovery: DiscoveryConfig::default(),
            announce: true,
        }
    }

    pub fn validate(&self) -> Result<(), RelayError> {
        if let InputSpec::Named { group, name } = &self.input {
            if *group == self.output_group && *name == self.output_name {
                return Err(RelayError::InvalidConfig(format!("input and output are both {group}/{name}")));
            }
        }
        if self.queue_depth == 0 {
            return Err(RelayError::InvalidConfig("queue depth must be at least 1".into()));
        }
        if self.frame_ring_capacity == 0 {
            return Err(RelayError::InvalidConfig("frame ring capacity must be at least 1".into()));
        }
        self.window.validate().map_err(|e| RelayError::InvalidConfig(e.to_string()))
    }
}

/// Counters and histograms, copied out as one consistent snapshot.
#[derive(Debug, Clone, Default)]
pub struct RelayStats {
    /// Pass-through frames forwarded, per kind. Injected metadata is not counted.
    pub frames_passed: [u64; 3],
    pub metadata_emitted: u64,
    /// Tag frames lost because the metadata queue was full.
    pub metadata_dropped: u64,
    pub windows_produced: u64,
    pub windows_tagged: u64,
    /// Windows shed from the analysis queue.
    pub windows_dropped: u64,
    /// Windows whose tagger call failed.
    pub tagger_failures: u64,
    /// Audio frames shed by the frame ring before windowing.
    pub audio_frames_shed: u64,
    pub connects: u64,
    /// Receive-to-forward time in microseconds.
    pub passthrough_latency_us: Histogram,
    /// Tagger time per window in microseconds.
    pub inference_us: Histogram,
}

impl RelayStats {
    pub fn frames_passed(&self, kind: FrameKind) -> u64 {
        self.frames_passed[kind.index()]
    }

    /// Windows queued or being tagged.
    pub fn windows_in_flight(&self) -> u64 {
        self.windows_produced - self.windows_tagged - self.windows_dropped - self.tagger_failures
    }

    pub fn report(&self) -> StatsReport {
        StatsReport {
            frames_audio: self.frames_passed[0],
            frames_video: self.frames_passed[1],
            frames_metadata: self.frames_passed[2],
            metadata_emitted: self.metadata_emitted,
            metadata_dropped: self.metadata_dropped,
            windows_produced: self.windows_produced,
            windows_tagged: self.windows_tagged,
            windows_dropped: self.windows_dropped,
            tagger_failures: self.tagger_failures,
            audio_frames_shed: self.audio_frames_shed,
            connects: self.connects,
            passthrough_latency_us: self.passthrough_latency_us.summary(),
            inference_us: self.inference_us.summary(),
        }
    }
}

/// The JSON shape of the periodic stats line.
#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub frames_audio: u64,
    pub frames_video: u64,
    pub frames_metadata: u64,
    pub metadata_emitted: u64,
    pub metadata_dropped: u64,
    pub windows_produced: u64,
    pub windows_tagged: u64,
    pub windows_dropped: u64,
    pub tagger_failures: u64,
    pub audio_frames_shed: u64,
    pub connects: u64,
    pub passthrough_latency_us: Summary,
    pub inference_us: Summary,
}

struct Shared {
    cfg: RelayConfig,
    stop: AtomicBool,
    stats: Mutex<RelayStats>,
    sender: Sender,
    frame_ring: FrameRing,
    windows: ArrayQueue<SampleWindow>,
    metadata: ArrayQueue<EncodedFrame>,
    /// Bumped on every input connection so the windower starts afresh.
    epoch: AtomicU64,
}

impl Shared {
    fn stopping(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    /// Sleeps up to `d`, returning early once stopping.
    fn pause(&self, d: Duration) {
        let until = Instant::now() + d;
        while !self.stopping() {
            let now = Instant::now();
            if now >= until {
                break;
            }
            thread::sleep((until - now).min(Duration::from_millis(20)));
        }
    }

    fn flush_metadata(&self) {
        while let Some(m) = self.metadata.pop() {
            self.sender.send_encoded(&m);
            self.stats.lock().unwrap().metadata_emitted += 1;
        }
    }
}

/// A running relay. Dropping it stops the relay.
pub struct RelayHandle {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    worker: Option<JoinHandle<()>>,
    windowing: Option<JoinHandle<()>>,
}

/// Opens the output and starts all relay threads. Only configuration and
/// output errors are reported; an unreachable input is retried forever.
pub fn start_relay(cfg: RelayConfig) -> Result<RelayHandle, RelayError> {
    cfg.validate()?;
    let mut out =
        SenderConfig::new(&cfg.output_name).group(&cfg.output_group).bind_ip(cfg.output_bind).port(cfg.output_port);
    if cfg.announce {
        out = out.announce(cfg.discovery.clone());
    }
    let sender = transport::create_sender(out)?;
    let finder = match &cfg.input {
        InputSpec::Named { .. } => Some(Finder::bind(&cfg.discovery)?),
        InputSpec::Addr(_) => None,
    };
    let shared = Arc::new(Shared {
        frame_ring: FrameRing::new(cfg.frame_ring_capacity),
        windows: ArrayQueue::new(cfg.queue_depth),
        metadata: ArrayQueue::new(METADATA_QUEUE_DEPTH),
        stop: AtomicBool::new(false),
        stats: Mutex::new(RelayStats::default()),
        epoch: AtomicU64::new(0),
        sender,
        cfg,
    });
    log::info!(
        "relay {} -> {}/{} on port {}",
        shared.cfg.input,
        shared.cfg.output_group,
        shared.cfg.output_name,
        shared.sender.port()
    );

    let worker = {
        let shared = Arc::clone(&shared);
        let stage =
            TaggingStage::new(shared.cfg.tagger.build(), Some(shared.cfg.window.window_samples), shared.cfg.top_k);
        spawn("relay-analysis", move || analysis_loop(&shared, stage))
    };
    let windowing = {
        let shared = Arc::clone(&shared);
        let worker_thread = worker.thread().clone();
        spawn("relay-windowing", move || windowing_loop(&shared, worker_thread))
    };
    let mut threads = Vec::new();
    {
        let shared = Arc::clone(&shared);
        let windowing_thread = windowing.thread().clone();
        threads.push(spawn("relay-ingest", move || ingest_loop(&shared, finder, windowing_thread)));
    }
    if let Some(interval) = shared.cfg.stats_interval {
        let shared = Arc::clone(&shared);
        threads.push(spawn("relay-stats", move || stats_loop(&shared, interval)));
    }
    Ok(RelayHandle { shared, threads, worker: Some(worker), windowing: Some(windowing) })
}

fn spawn<F: FnOnce() + Send + 'static>(name: &str, f: F) -> JoinHandle<()> {
    thread::Builder::new().name(name.into()).spawn(f).expect("spawn relay thread")
}

impl RelayHandle {
    pub fn output_addr(&self) -> SocketAddr {
        self.shared.sender.local_addr()
    }

    pub fn advertisement(&self) -> &SourceAdvertisement {
        self.shared.sender.advertisement()
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.sender.subscriber_count()
    }

    /// Consistent point-in-time copy of the counters.
    pub fn snapshot_stats(&self) -> RelayStats {
        self.shared.stats.lock().unwrap().clone()
    }

    /// Polls the stats until `pred` holds or `timeout` passes.
    pub fn wait_for_stats<F: FnMut(&RelayStats) -> bool>(&self, timeout: Duration, mut pred: F) -> Option<RelayStats> {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.snapshot_stats();
            if pred(&s) {
                return Some(s);
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Stops every thread, forwards tag frames still queued, closes the
    /// output stream and returns the final stats. Windows still waiting
    /// for analysis are counted as dropped.
    pub fn stop(mut self) -> RelayStats {
        self.shutdown();
        self.snapshot_stats()
    }

    fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(w) = self.windowing.take() {
            let _ = w.join();
        }
        if let Some(w) = self.worker.take() {
            w.thread().unpark();
            let _ = w.join();
        }
        {
            let mut st = self.shared.stats.lock().unwrap();
            while self.shared.windows.pop().is_some() {
                st.windows_dropped += 1;
            }
        }
        self.shared.flush_metadata();
        log::info!("relay stopped: {}", serde_json::to_string(&self.snapshot_stats().report()).unwrap_or_default());
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.shutdown();
        // Closes the output once the last thread's reference is gone.
    }
}

/// Runs a relay until `shutdown` becomes true.
pub fn run_relay(cfg: RelayConfig, shutdown: &AtomicBool) -> Result<RelayStats, RelayError> {
    let handle = start_relay(cfg)?;
    while !shutdown.load(Ordering::Relaxed) {
        thread::sleep(Duration::from_millis(50));
    }
    Ok(handle.stop())
}

fn resolve(shared: &Shared, finder: Option<&Finder>) -> Option<SocketAddr> {
    match (&shared.cfg.input, finder) {
        (InputSpec::Addr(a), _) => Some(*a),
        (InputSpec::Named { group, name }, Some(f)) => {
            // Give announcements one interval to arrive.
            let deadline = Instant::now() + shared.cfg.discovery.announce_interval;
            loop {
                if let Some(ad) = f.lookup(group, name) {
                    return Some(ad.endpoint());
                }
                if Instant::now() >= deadline || shared.stopping() {
                    return None;
                }
                thread::sleep(Duration::from_millis(20));
            }
        }
        (InputSpec::Named { .. }, None) => None,
    }
}

fn ingest_loop(shared: &Shared, finder: Option<Finder>, windowing: Thread) {
    let mut backoff = BACKOFF_INITIAL;
    let rx_cfg = ReceiverConfig::default();
    while !shared.stopping() {
        let session = match resolve(shared, finder.as_ref()) {
            None => Err(format!("{} not found", shared.cfg.input)),
            Some(addr) => transport::connect_addr(&rx_cfg, addr).map_err(|e| e.to_string()),
        };
        let mut session = match session {
            Ok(s) => s,
            Err(e) => {
                log::warn!("input {}: {e}; retrying in {:?}", shared.cfg.input, backoff);
                shared.flush_metadata();
                shared.pause(backoff);
                backoff = (backoff * 2).min(BACKOFF_MAX);
                continue;
            }
        };
        backoff = BACKOFF_INITIAL;
        shared.epoch.fetch_add(1, Ordering::SeqCst);
        shared.stats.lock().unwrap().connects += 1;
        log::info!("input connected to {}", session.peer());
        while !shared.stopping() {
            match session.recv(INGEST_POLL) {
                Recv::Frame(r) => {
                    shared.sender.send_encoded(&r.encoded);
                    let latency_us = r.received_at.elapsed().as_micros() as u64;
                    let kind = r.encoded.kind();
                    {
                        let mut st = shared.stats.lock().unwrap();
                        st.frames_passed[kind.index()] += 1;
                        st.passthrough_latency_us.record(latency_us);
                    }
                    if let Frame::Audio(a) = r.frame {
                        shared.frame_ring.push(a);
                        windowing.unpark();
                    }
                    shared.flush_metadata();
                }
                Recv::Timeout => shared.flush_metadata(),
                Recv::EndOfStream => {
                    log::warn!("input {} ended; reconnecting", shared.cfg.input);
                    break;
                }
            }
        }
    }
}

fn windowing_loop(shared: &Shared, worker: Thread) {
    let mut windower = Windower::new(shared.cfg.window.clone()).expect("validated window config");
    let mut epoch = shared.epoch.load(Ordering::SeqCst);
    let mut shed_seen = 0;
    while !shared.stopping() {
        thread::park_timeout(WINDOWING_POLL);
        let now_epoch = shared.epoch.load(Ordering::SeqCst);
        if now_epoch != epoch {
            epoch = now_epoch;
            windower.reset(shared.cfg.window.sample_rate_hz);
        }
        let windows = windower.drain(&shared.frame_ring);
        let shed = shared.frame_ring.dropped_frames();
        if windows.is_empty() && shed == shed_seen {
            continue;
        }
        {
            let mut st = shared.stats.lock().unwrap();
            st.audio_frames_shed = shed;
            for w in windows {
                st.windows_produced += 1;
                if shared.windows.force_push(w).is_some() {
                    st.windows_dropped += 1;
                }
            }
        }
        shed_seen = shed;
        worker.unpark();
    }
}

fn analysis_loop(shared: &Shared, mut stage: TaggingStage) {
    let source = shared.cfg.output_name.clone();
    loop {
        let Some(window) = shared.windows.pop() else {
            if shared.stopping() {
                return;
            }
            thread::park_timeout(WINDOWING_POLL);
            continue;
        };
        match stage.tag(&window) {
            Ok(result) => {
                let meta = build_metadata_xml(&result, &source);
                let inference_us = (result.inference_ms * 1e3) as u64;
                let encoded = match frames::encode_frame(&Frame::Metadata(meta)) {
                    Ok(e) => e,
                    Err(e) => {
                        log::error!("cannot encode tag metadata: {e}");
                        shared.stats.lock().unwrap().tagger_failures += 1;
                        continue;
                    }
                };
                let mut st = shared.stats.lock().unwrap();
                st.windows_tagged += 1;
                st.inference_us.record(inference_us);
                if shared.metadata.force_push(encoded).is_some() {
                    st.metadata_dropped += 1;
                }
            }
            Err(e) => {
                log::warn!("window not tagged: {e}");
                shared.stats.lock().unwrap().tagger_failures += 1;
            }
        }
        if shared.stopping() {
            // Remaining windows are accounted as dropped by the stopper.
            return;
        }
    }
}

fn stats_loop(shared: &Shared, interval: Duration) {
    loop {
        shared.pause(interval);
        if shared.stopping() {
            return;
        }
        let report = shared.stats.lock().unwrap().report();
        match serde_json::to_string(&report) {
            Ok(line) => eprintln!("{line}"),
            Err(e) => log::warn!("cannot serialise stats: {e}"),
        }
    }
}
